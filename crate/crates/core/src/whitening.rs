//! Instance-selective whitening: feature covariance, photometric-pair
//! variance, k-means style/content split, and the selective whitening loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GradPair, Tensor};
use crate::scalar::Scalar;

/// C x C symmetric covariance of standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix<T: Scalar> {
    pub dim: usize,
    pub mat: Tensor<T>,
}

impl<T: Scalar> CovMatrix<T> {
    pub fn from_tensor(mat: Tensor<T>) -> Result<Self> {
        let s = mat.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::ShapeMismatch(format!(
                "covariance must be square, got {s:?}"
            )));
        }
        Ok(CovMatrix { dim: s[0], mat })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.mat.data()[i * self.dim + j]
    }
}

/// C x C non-negative, symmetric variance of covariances across a
/// photometric pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap<T: Scalar> {
    pub dim: usize,
    pub mat: Tensor<T>,
}

impl<T: Scalar> VarianceMap<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.mat.data()[i * self.dim + j]
    }
}

/// Binary style mask: 1 marks covariance entries whose pair variance fell in
/// the high (style) cluster. Symmetric, zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMask {
    pub dim: usize,
    pub data: Vec<u8>,
    pub n_high: usize,
    pub n_low: usize,
}

impl StyleMask {
    pub fn empty(dim: usize) -> Self {
        StyleMask {
            dim,
            data: vec![0; dim * dim],
            n_high: 0,
            n_low: dim * (dim - 1) / 2,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.dim + j]
    }
}

/// theta = F F^T / (H*W) for standardized features `[C,H,W]` (or `[1,C,H,W]`).
pub fn covariance<T: Scalar>(f_std: &Tensor<T>) -> Result<CovMatrix<T>> {
    let s = f_std.shape();
    let (c, hw) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "covariance expects [C,H,W] features, got {s:?}"
            )))
        }
    };
    let data = f_std.data();
    let inv = T::one() / T::of_usize(hw);
    let mut mat = Tensor::zeros(&[c, c]);
    let m = mat.data_mut();
    for i in 0..c {
        let fi = &data[i * hw..(i + 1) * hw];
        for j in i..c {
            let fj = &data[j * hw..(j + 1) * hw];
            let v = crate::numerics::ops::dot4(fi, fj) * inv;
            m[i * c + j] = v;
            m[j * c + i] = v;
        }
    }
    Ok(CovMatrix { dim: c, mat })
}

/// Gradient of a scalar loss w.r.t. the features, given its gradient w.r.t.
/// the covariance. For symmetric grad G: dL/dF = (G + G^T) F / (H*W).
pub fn covariance_backward<T: Scalar>(
    f_std: &Tensor<T>,
    grad_cov: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = f_std.shape();
    let (c, hw) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "covariance expects [C,H,W] features, got {s:?}"
            )))
        }
    };
    if grad_cov.shape() != [c, c] {
        return Err(Error::ShapeMismatch(format!(
            "grad {:?} vs covariance [{c},{c}]",
            grad_cov.shape()
        )));
    }
    let inv = T::one() / T::of_usize(hw);
    let f = f_std.data();
    let g = grad_cov.data();
    let mut out = Tensor::zeros(s);
    let o = out.data_mut();
    for i in 0..c {
        for j in 0..c {
            let w = (g[i * c + j] + g[j * c + i]) * inv;
            if w == T::zero() {
                continue;
            }
            let fj = j * hw;
            let oi = i * hw;
            crate::numerics::ops::axpy(&mut o[oi..oi + hw], w, &f[fj..fj + hw]);
        }
    }
    Ok(out)
}

/// Whitening penalty of a full covariance: mean |theta - I| over all C^2
/// entries. Kept as an ablation term.
pub fn dwt_loss<T: Scalar>(cov: &CovMatrix<T>) -> GradPair<T> {
    let c = cov.dim;
    let inv = T::one() / T::of_usize(c * c);
    let mut value = T::zero();
    for i in 0..c {
        for j in 0..c {
            let target = if i == j { T::one() } else { T::zero() };
            value += (cov.get(i, j) - target).abs() * inv;
        }
    }
    let mat = cov.mat.clone();
    GradPair::new(
        Tensor::scalar(value),
        Box::new(move |g| {
            let c = mat.shape()[0];
            let inv = T::one() / T::of_usize(c * c);
            let mut grad = Tensor::zeros(mat.shape());
            for i in 0..c {
                for j in 0..c {
                    let target = if i == j { T::one() } else { T::zero() };
                    let d = mat.data()[i * c + j] - target;
                    grad.data_mut()[i * c + j] = d.signum() * inv * g.item();
                }
            }
            vec![grad]
        }),
    )
}

/// Entrywise variance of two covariances around their mean; algebraically
/// ((a - b)/2)^2.
pub fn pair_variance<T: Scalar>(
    cov_orig: &CovMatrix<T>,
    cov_aug: &CovMatrix<T>,
) -> Result<VarianceMap<T>> {
    if cov_orig.dim != cov_aug.dim {
        return Err(Error::ShapeMismatch(format!(
            "covariance dims {} vs {}",
            cov_orig.dim, cov_aug.dim
        )));
    }
    let half = T::of_f64(0.5);
    let mat = cov_orig.mat.zip(&cov_aug.mat, |a, b| {
        let d = (a - b) * half;
        d * d
    })?;
    Ok(VarianceMap {
        dim: cov_orig.dim,
        mat,
    })
}

/// Mean over instances of the per-pair variance.
pub fn pair_variance_batch<T: Scalar>(
    pairs: &[(CovMatrix<T>, CovMatrix<T>)],
) -> Result<VarianceMap<T>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("pair_variance_batch needs >= 1 pair".into()));
    }
    let mut acc = pair_variance(&pairs[0].0, &pairs[0].1)?;
    for (a, b) in &pairs[1..] {
        let v = pair_variance(a, b)?;
        acc.mat = acc.mat.zip(&v.mat, |x, y| x + y)?;
    }
    let inv = T::one() / T::of_usize(pairs.len());
    acc.mat = acc.mat.map(|v| v * inv);
    Ok(acc)
}

fn lloyd_1d(values: &[f64], mut c0: f64, mut c1: f64, iters: usize) -> (f64, f64, f64) {
    for _ in 0..iters {
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if (v - c0).abs() <= (v - c1).abs() {
                s0 += v;
                n0 += 1;
            } else {
                s1 += v;
                n1 += 1;
            }
        }
        let nc0 = if n0 > 0 { s0 / n0 as f64 } else { c0 };
        let nc1 = if n1 > 0 { s1 / n1 as f64 } else { c1 };
        if nc0 == c0 && nc1 == c1 {
            break;
        }
        c0 = nc0;
        c1 = nc1;
    }
    let sse: f64 = values
        .iter()
        .map(|&v| (v - c0).powi(2).min((v - c1).powi(2)))
        .sum();
    (c0, c1, sse)
}

/// 1-D 2-means over the strictly-upper-triangular variance entries.
///
/// The cluster with the larger centroid becomes G_high; the mask marks those
/// positions symmetrically with the diagonal forced to 0. Degenerate inputs
/// (all entries equal) yield an all-zero mask.
pub fn kmeans_split<T: Scalar>(
    v: &VarianceMap<T>,
    iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<StyleMask> {
    let c = v.dim;
    if c < 2 {
        return Err(Error::InvalidArg("kmeans_split needs C >= 2".into()));
    }
    let mut entries = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in (i + 1)..c {
            entries.push(v.get(i, j).as_f64());
        }
    }
    let lo = entries.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = entries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(StyleMask::empty(c));
    }
    // restart 0 seeds at the extremes; the rest are random data pairs
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, f64, f64)> = None;
    for r in 0..restarts.max(1) {
        let (i0, i1) = if r == 0 {
            (lo, hi)
        } else {
            let a = entries[rng.gen_range(0..entries.len())];
            let mut b = entries[rng.gen_range(0..entries.len())];
            let mut guard = 0;
            while b == a && guard < 32 {
                b = entries[rng.gen_range(0..entries.len())];
                guard += 1;
            }
            if b == a {
                continue;
            }
            (a, b)
        };
        let sol = lloyd_1d(&entries, i0, i1, iters);
        best = Some(match best {
            None => sol,
            Some(b) if sol.2 < b.2 => sol,
            Some(b) => b,
        });
    }
    let (c0, c1, _) = best.expect("restart 0 always runs");
    let high = c0.max(c1);
    let low = c0.min(c1);
    let mut mask = StyleMask::empty(c);
    let (mut n_high, mut n_low) = (0usize, 0usize);
    for i in 0..c {
        for j in (i + 1)..c {
            let val = v.get(i, j).as_f64();
            if (val - high).abs() < (val - low).abs() {
                mask.data[i * c + j] = 1;
                mask.data[j * c + i] = 1;
                n_high += 1;
            } else {
                n_low += 1;
            }
        }
    }
    mask.n_high = n_high;
    mask.n_low = n_low;
    Ok(mask)
}

/// Selective whitening loss: mean |theta| over the masked (style) entries;
/// zero when the mask is empty.
pub fn isw_loss<T: Scalar>(cov: &CovMatrix<T>, mask: &StyleMask) -> Result<GradPair<T>> {
    if cov.dim != mask.dim {
        return Err(Error::ShapeMismatch(format!(
            "covariance dim {} vs mask dim {}",
            cov.dim, mask.dim
        )));
    }
    let c = cov.dim;
    let selected = mask.data.iter().filter(|&&m| m != 0).count();
    // arithmetic mean over all off-diagonal entries (unmasked ones contribute
    // zero), so per-entry pressure does not grow as the mask gets sparser
    let denom = (c * c).saturating_sub(c).max(1);
    let mut value = T::zero();
    if selected > 0 {
        let inv = T::one() / T::of_usize(denom);
        for i in 0..c * c {
            if mask.data[i] != 0 {
                value += cov.mat.data()[i].abs() * inv;
            }
        }
    }
    let mat = cov.mat.clone();
    let mdata = mask.data.clone();
    Ok(GradPair::new(
        Tensor::scalar(value),
        Box::new(move |g| {
            let mut grad = Tensor::zeros(mat.shape());
            if selected > 0 {
                let inv = T::one() / T::of_usize(denom);
                for (i, gv) in grad.data_mut().iter_mut().enumerate() {
                    if mdata[i] != 0 {
                        *gv = mat.data()[i].signum() * inv * g.item();
                    }
                }
            }
            vec![grad]
        }),
    ))
}

/// Warm-up bookkeeping: accumulates pair variances per hooked layer for the
/// first `warmup_epochs` epochs, then freezes a style mask per layer.
#[derive(Debug, Clone)]
pub struct IswState<T: Scalar> {
    pub warmup_epochs: usize,
    pub kmeans_seed: u64,
    /// Re-run the k-means split each epoch after warm-up instead of freezing.
    pub recluster_each_epoch: bool,
    layers: Vec<LayerState<T>>,
}

#[derive(Debug, Clone)]
struct LayerState<T: Scalar> {
    v_sum: Option<Tensor<T>>,
    v_count: usize,
    mask: Option<StyleMask>,
}

impl<T: Scalar> IswState<T> {
    pub fn new(num_layers: usize, warmup_epochs: usize, kmeans_seed: u64) -> Self {
        IswState {
            warmup_epochs,
            kmeans_seed,
            recluster_each_epoch: false,
            layers: (0..num_layers)
                .map(|_| LayerState {
                    v_sum: None,
                    v_count: 0,
                    mask: None,
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// The frozen mask for a layer; absent until warm-up completes.
    pub fn mask(&self, layer_id: usize) -> Option<&StyleMask> {
        self.layers.get(layer_id).and_then(|l| l.mask.as_ref())
    }

    pub fn warmed_up(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs
    }

    /// Mean accumulated variance for a layer, if any was recorded.
    pub fn mean_variance(&self, layer_id: usize) -> Option<VarianceMap<T>> {
        let l = self.layers.get(layer_id)?;
        let sum = l.v_sum.as_ref()?;
        let inv = T::one() / T::of_usize(l.v_count);
        Some(VarianceMap {
            dim: sum.shape()[0],
            mat: sum.map(|v| v * inv),
        })
    }
}

/// Feeds one pair-variance observation into the warm-up accumulator and
/// freezes the layer mask once `epoch` reaches the warm-up length.
pub fn isw_update<T: Scalar>(
    state: &mut IswState<T>,
    layer_id: usize,
    v: &VarianceMap<T>,
    epoch: usize,
) -> Result<()> {
    let warmup = state.warmup_epochs;
    let seed = state.kmeans_seed;
    let recluster = state.recluster_each_epoch;
    let num_layers = state.layers.len();
    let layer = state
        .layers
        .get_mut(layer_id)
        .ok_or_else(|| Error::InvalidArg(format!("unknown ISW layer id {layer_id} (have {num_layers})")))?;
    if epoch < warmup {
        match &mut layer.v_sum {
            None => {
                layer.v_sum = Some(v.mat.clone());
                layer.v_count = 1;
            }
            Some(sum) => {
                *sum = sum.zip(&v.mat, |a, b| a + b)?;
                layer.v_count += 1;
            }
        }
        return Ok(());
    }
    // warm-up over: freeze once (or re-cluster per call when configured)
    if layer.mask.is_none() || recluster {
        let accumulated = match (&layer.v_sum, recluster) {
            (Some(sum), false) => {
                let inv = T::one() / T::of_usize(layer.v_count);
                VarianceMap {
                    dim: sum.shape()[0],
                    mat: sum.map(|x| x * inv),
                }
            }
            _ => v.clone(),
        };
        layer.mask = Some(kmeans_split(&accumulated, 100, 5, seed)?);
    }
    Ok(())
}
