//! Superpixel-guided consistency loss, binary cross entropy, and their
//! weighted combination.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{rgb_to_lab, Image, Mask};
use crate::numerics::{GradPair, Tensor};
use crate::scalar::Scalar;
use crate::slic::{slic_run, SlicParams, SuperpixelGrid};

/// Foreground probability map, entries in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PredMask<T: Scalar> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> PredMask<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "prediction must be [H,W], got {:?}",
                probs.shape()
            )));
        }
        if !probs
            .data()
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
        {
            return Err(Error::InvalidArg(
                "prediction probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(PredMask { probs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LsgMode {
    /// Indicator average: a metric, gradient is zero.
    Hard,
    /// Hinge relaxation relu(tau - o)/tau, differentiable a.e.
    Soft,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlicLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Occupancy threshold, in (0.5, 1].
    pub tau: f64,
    pub mode: LsgMode,
}

impl SlicLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0)
        {
            return Err(Error::InvalidArg(
                "lambda1, lambda2 must be >= 0 and not both zero".into(),
            ));
        }
        if !(self.tau > 0.5 && self.tau <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "tau must lie in (0.5, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Per-region single-class occupancy: o_j = max(mean p, 1 - mean p).
pub fn occupancy<T: Scalar>(probs: &Tensor<T>, grid: &SuperpixelGrid) -> Result<Vec<T>> {
    if probs.shape() != [grid.height, grid.width] {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs grid {}x{}",
            probs.shape(),
            grid.height,
            grid.width
        )));
    }
    let mut sums = vec![T::zero(); grid.num_regions];
    for (i, &p) in probs.data().iter().enumerate() {
        sums[grid.labels[i] as usize] += p;
    }
    Ok(sums
        .iter()
        .zip(&grid.region_sizes)
        .map(|(&s, &n)| {
            let mean = s / T::of_usize(n);
            mean.max(T::one() - mean)
        })
        .collect())
}

/// Superpixel consistency loss over region occupancies.
///
/// Hard mode counts regions below the threshold and averages; soft mode
/// replaces the indicator with a hinge so the loss can train the network.
pub fn l_sg<T: Scalar>(
    probs: &Tensor<T>,
    grid: &SuperpixelGrid,
    tau: T,
    mode: LsgMode,
) -> Result<GradPair<T>> {
    if !(tau.as_f64() > 0.5 && tau.as_f64() <= 1.0) {
        return Err(Error::InvalidArg(format!("tau must lie in (0.5,1], got {tau}")));
    }
    let occ = occupancy(probs, grid)?;
    let j_inv = T::one() / T::of_usize(grid.num_regions);
    let value = match mode {
        LsgMode::Hard => occ
            .iter()
            .fold(T::zero(), |a, &o| if o < tau { a + j_inv } else { a }),
        LsgMode::Soft => occ.iter().fold(T::zero(), |a, &o| {
            a + (tau - o).max(T::zero()) / tau * j_inv
        }),
    };
    let shape = probs.shape().to_vec();
    let grid_labels = grid.labels.clone();
    let region_sizes = grid.region_sizes.clone();
    let probs_data = probs.data().to_vec();
    Ok(GradPair::new(
        Tensor::scalar(value),
        Box::new(move |g| {
            let mut grad = Tensor::zeros(&shape);
            if mode == LsgMode::Soft {
                // per region below threshold: dL/d(mean p) = -sign(mean p - 1/2) / (J tau)
                let mut sums = vec![T::zero(); region_sizes.len()];
                for (i, &p) in probs_data.iter().enumerate() {
                    sums[grid_labels[i] as usize] += p;
                }
                let half = T::of_f64(0.5);
                let mut region_grad = vec![T::zero(); region_sizes.len()];
                for (r, (&s, &n)) in sums.iter().zip(&region_sizes).enumerate() {
                    let mean = s / T::of_usize(n);
                    let o = mean.max(T::one() - mean);
                    if o < tau {
                        let sign = if mean >= half { T::one() } else { -T::one() };
                        region_grad[r] =
                            -sign * j_inv / tau / T::of_usize(n) * g.item();
                    }
                }
                for (i, gv) in grad.data_mut().iter_mut().enumerate() {
                    *gv = region_grad[grid_labels[i] as usize];
                }
            }
            vec![grad]
        }),
    ))
}

/// Pixel-mean binary cross entropy with probability clamping.
pub fn bce<T: Scalar>(y: &Mask, y_prob: &Tensor<T>, clamp_eps: f64) -> Result<GradPair<T>> {
    if y_prob.shape() != [y.height, y.width] {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs mask {}x{}",
            y_prob.shape(),
            y.height,
            y.width
        )));
    }
    let eps = T::of_f64(clamp_eps);
    let lo = eps;
    let hi = T::one() - eps;
    let n_inv = T::one() / T::of_usize(y_prob.numel());
    let mut value = T::zero();
    for (&p, &t) in y_prob.data().iter().zip(&y.data) {
        let p = p.max(lo).min(hi);
        value = value
            - n_inv
                * if t != 0 {
                    p.ln()
                } else {
                    (T::one() - p).ln()
                };
    }
    let shape = y_prob.shape().to_vec();
    let probs = y_prob.data().to_vec();
    let targets = y.data.clone();
    Ok(GradPair::new(
        Tensor::scalar(value),
        Box::new(move |g| {
            let mut grad = Tensor::zeros(&shape);
            for ((gv, &p), &t) in grad.data_mut().iter_mut().zip(&probs).zip(&targets) {
                // zero slope where the clamp is active
                if p < lo || p > hi {
                    continue;
                }
                let d = if t != 0 {
                    -T::one() / p
                } else {
                    T::one() / (T::one() - p)
                };
                *gv = d * n_inv * g.item();
            }
            vec![grad]
        }),
    ))
}

/// Superpixel grids keyed by image content + parameters; safe for concurrent
/// readers with single-writer insertion.
#[derive(Default)]
pub struct GridCache {
    map: RwLock<HashMap<[u8; 32], Arc<SuperpixelGrid>>>,
}

impl GridCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(image: &Image, params: &SlicParams) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(image.width.to_le_bytes());
        hasher.update(image.height.to_le_bytes());
        for v in &image.pixels {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(params.k.to_le_bytes());
        hasher.update(params.m.to_le_bytes());
        hasher.update(params.max_iter.to_le_bytes());
        hasher.update(params.min_region_frac.to_le_bytes());
        hasher.finalize().into()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("grid cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(
        &self,
        image: &Image,
        params: &SlicParams,
    ) -> Result<Arc<SuperpixelGrid>> {
        let key = Self::key(image, params);
        if let Some(hit) = self.map.read().expect("grid cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let grid = Arc::new(slic_run(&rgb_to_lab(image), params)?);
        self.map
            .write()
            .expect("grid cache lock")
            .insert(key, grid.clone());
        Ok(grid)
    }
}

/// Combined loss with per-term values retained for logging.
pub struct SlicLoss<T: Scalar> {
    pub total: GradPair<T>,
    pub l_ce: f64,
    pub l_sg: f64,
    pub grid: Arc<SuperpixelGrid>,
}

/// lambda1 * L_CE + lambda2 * L_SG over a superpixel grid of `x`.
pub fn l_slic<T: Scalar>(
    x: &Image,
    y: &Mask,
    y_prob: &PredMask<T>,
    cfg: &SlicLossConfig,
    slic_params: &SlicParams,
    cache: &GridCache,
) -> Result<SlicLoss<T>> {
    cfg.validate()?;
    let grid = cache.get_or_compute(x, slic_params)?;
    let ce = bce(y, &y_prob.probs, 1e-7)?;
    let sg = l_sg(&y_prob.probs, &grid, T::of_f64(cfg.tau), cfg.mode)?;
    let l1 = T::of_f64(cfg.lambda1);
    let l2 = T::of_f64(cfg.lambda2);
    let total_value = l1 * ce.value.item() + l2 * sg.value.item();
    let l_ce = ce.value.item().as_f64();
    let l_sg_val = sg.value.item().as_f64();
    let shape = y_prob.probs.shape().to_vec();
    let total = GradPair::new(
        Tensor::scalar(total_value),
        Box::new(move |g| {
            let s = Tensor::scalar(g.item());
            let mut grad = Tensor::zeros(&shape);
            grad.axpy(l1, &ce.backward(&s)[0]);
            grad.axpy(l2, &sg.backward(&s)[0]);
            vec![grad]
        }),
    );
    Ok(SlicLoss {
        total,
        l_ce,
        l_sg: l_sg_val,
        grid,
    })
}
