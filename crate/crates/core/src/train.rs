//! Training harness: SGD with a polynomial schedule, the combined objective
//! (task + selective whitening + superpixel consistency), warm-up
//! choreography, and the hyperparameter grid search.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{
    geometric_augment, load_image, load_mask, GeometricConfig, Image, Mask, PhotometricParams,
};
use crate::metrics::{confusion, metrics_from};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::segnet::{
    forward, forward_pair, tensor_from_image, Checkpoint, CheckpointMeta, SegNetwork,
    NUM_HOOKED_LAYERS,
};
use crate::slic::SlicParams;
use crate::slic_loss::{bce, l_slic, GridCache, LsgMode, PredMask, SlicLossConfig};
use crate::synthdata::{load_manifest, Split};
use crate::whitening::{covariance, covariance_backward, isw_loss, isw_update, pair_variance, IswState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// superpixel-consistency weight w: lambda2 = w, lambda1 = 1 - w
    pub slic_weight: f64,
    pub slic_k: usize,
    pub slic_m: f64,
    pub tau: f64,
    /// per-layer weight of the selective whitening terms
    pub isw_lambda: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub use_slic_loss: bool,
    pub use_isw: bool,
    /// re-run the style clustering on the running-mean variance every epoch
    /// instead of freezing the masks when warm-up ends
    pub isw_recluster: bool,
    pub input_size: usize,
    pub widths: [usize; 3],
    pub jitter: PhotometricParams,
    pub geometric: GeometricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-2,
            power: 0.9,
            epochs: 30,
            batch_size: 2,
            slic_weight: 0.75,
            slic_k: 500,
            slic_m: 50.0,
            tau: 0.9,
            isw_lambda: 0.6,
            warmup_epochs: 5,
            seed: 0,
            use_slic_loss: true,
            use_isw: true,
            isw_recluster: false,
            input_size: 256,
            widths: [8, 16, 32],
            jitter: PhotometricParams::default(),
            geometric: GeometricConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0
            || self.power <= 0.0
            || self.epochs == 0
            || self.batch_size == 0
            || self.slic_k == 0
            || self.slic_m <= 0.0
            || self.isw_lambda < 0.0
            || self.input_size == 0
            || self.input_size % 8 != 0
        {
            return Err(Error::InvalidArg("training config fields must be positive (input size a multiple of 8)".into()));
        }
        if !(0.0..=1.0).contains(&self.slic_weight) {
            return Err(Error::InvalidArg(format!(
                "slic weight {} must lie in [0,1]",
                self.slic_weight
            )));
        }
        Ok(())
    }

    pub fn slic_loss_config(&self) -> SlicLossConfig {
        SlicLossConfig {
            lambda1: 1.0 - self.slic_weight,
            lambda2: self.slic_weight,
            tau: self.tau,
            mode: LsgMode::Soft,
        }
    }

    pub fn slic_params(&self) -> SlicParams {
        SlicParams::new(self.slic_k, self.slic_m)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// lr0 * (1 - step/total)^power, evaluated per optimizer step.
pub fn poly_lr(lr0: f64, step: usize, total_steps: usize, power: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::InvalidArg(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub slic: f64,
    /// lambda-weighted sum over the hooked layers
    pub isw: f64,
    pub isw_per_layer: Vec<f64>,
}

/// Eq-style combination used by `total_loss`; exposed for direct testing.
pub fn combine_total(task: f64, isw_terms: &[f64], slic: f64, lambda: f64) -> LossBreakdown {
    let isw = lambda * isw_terms.iter().sum::<f64>();
    LossBreakdown {
        total: task + isw + slic,
        task,
        slic,
        isw,
        isw_per_layer: isw_terms.to_vec(),
    }
}

pub struct TrainSample {
    pub image: Image,
    pub mask: Mask,
    /// seed for the photometric pair transform
    pub pair_seed: u64,
}

pub struct LossOutput<T: Scalar> {
    pub breakdown: LossBreakdown,
    /// gradients in network parameter order
    pub grads: Vec<Tensor<T>>,
}

fn probs_2d<T: Scalar>(probs4: &Tensor<T>) -> Result<Tensor<T>> {
    let s = probs4.shape();
    Tensor::from_vec(&[s[2], s[3]], probs4.data().to_vec())
}

/// One batch of the combined objective, with gradients for every parameter.
/// During warm-up epochs the whitening terms are exactly zero and the batch
/// only feeds the variance accumulator.
pub fn total_loss<T: Scalar>(
    net: &SegNetwork<T>,
    batch: &[TrainSample],
    cfg: &TrainConfig,
    isw_state: &mut IswState<T>,
    epoch: usize,
    cache: &GridCache,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    cfg.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor<T>> = net
        .params()
        .iter()
        .map(|(_, p)| Tensor::zeros(p.shape()))
        .collect();
    let mut task_sum = 0.0;
    let mut slic_sum = 0.0;
    let mut isw_sums = vec![0.0f64; NUM_HOOKED_LAYERS];
    let warmed = epoch >= cfg.warmup_epochs;

    for sample in batch {
        let pair = if cfg.use_isw {
            Some(forward_pair(net, &sample.image, &cfg.jitter, sample.pair_seed)?)
        } else {
            None
        };
        let owned_out;
        let out = match &pair {
            Some(p) => &p.orig,
            None => {
                let x = tensor_from_image::<T>(&sample.image);
                owned_out = forward(net, &x, false)?;
                &owned_out
            }
        };
        let probs = probs_2d(&out.probs)?;
        let pred = PredMask::new(probs.clone())?;
        let task = bce(&sample.mask, &probs, 1e-7)?;
        task_sum += task.value.item().as_f64() * scale;
        let mut gprobs = task.backward(&Tensor::scalar(T::of_f64(scale))).remove(0);

        if cfg.use_slic_loss {
            let sl = l_slic(
                &sample.image,
                &sample.mask,
                &pred,
                &cfg.slic_loss_config(),
                &cfg.slic_params(),
                cache,
            )?;
            slic_sum += sl.total.value.item().as_f64() * scale;
            gprobs.axpy(
                T::one(),
                &sl.total.backward(&Tensor::scalar(T::of_f64(scale)))[0],
            );
        }

        let mut feat_grads_orig: Vec<Option<Tensor<T>>> = vec![None; NUM_HOOKED_LAYERS];
        let mut feat_grads_aug: Vec<Option<Tensor<T>>> = vec![None; NUM_HOOKED_LAYERS];
        if let Some(p) = &pair {
            for layer in 0..NUM_HOOKED_LAYERS {
                let cov_o = covariance(&p.orig.features[layer])?;
                let cov_a = covariance(&p.aug.features[layer])?;
                let v = pair_variance(&cov_o, &cov_a)?;
                isw_update(isw_state, layer, &v, epoch)?;
                if !warmed {
                    continue;
                }
                let mask = isw_state
                    .mask(layer)
                    .expect("mask frozen once past warm-up")
                    .clone();
                let term_o = isw_loss(&cov_o, &mask)?;
                let term_a = isw_loss(&cov_a, &mask)?;
                let term = 0.5 * (term_o.value.item().as_f64() + term_a.value.item().as_f64());
                isw_sums[layer] += term * scale;
                // chain: d(total)/d(theta) carries lambda, the pair average,
                // and the batch mean
                let gout = Tensor::scalar(T::of_f64(cfg.isw_lambda * 0.5 * scale));
                let gcov_o = term_o.backward(&gout).remove(0);
                let gcov_a = term_a.backward(&gout).remove(0);
                feat_grads_orig[layer] =
                    Some(covariance_backward(&p.orig.features[layer], &gcov_o)?);
                feat_grads_aug[layer] =
                    Some(covariance_backward(&p.aug.features[layer], &gcov_a)?);
            }
        }

        let gprobs4 = {
            let s = out.probs.shape().to_vec();
            Tensor::from_vec(&s, gprobs.into_data())?
        };
        let sample_grads = out.backward(&gprobs4, &feat_grads_orig)?;
        for (acc, g) in grads.iter_mut().zip(&sample_grads) {
            acc.axpy(T::one(), g);
        }
        if let Some(p) = &pair {
            if feat_grads_aug.iter().any(|g| g.is_some()) {
                let zero = Tensor::zeros(p.aug.probs.shape());
                let aug_grads = p.aug.backward(&zero, &feat_grads_aug)?;
                for (acc, g) in grads.iter_mut().zip(&aug_grads) {
                    acc.axpy(T::one(), g);
                }
            }
        }
    }

    let breakdown = combine_total(task_sum, &isw_sums, slic_sum, cfg.isw_lambda);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss diverged: task {} slic {} isw {}",
            breakdown.task, breakdown.slic, breakdown.isw
        )));
    }
    Ok(LossOutput { breakdown, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_task: f64,
    pub l_slic: f64,
    pub l_isw: f64,
    pub lr: f64,
    pub val_iou: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
}

pub struct DatasetFile {
    pub file: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Lists image/mask pairs under `dir` (`images/` + `masks/`). When a
/// manifest is present and contains entries for `split`, only those files
/// are used; a bare directory uses everything.
pub fn list_samples(dir: &Path, split: Split) -> Result<Vec<DatasetFile>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let mut names: Vec<String> = if let Ok(manifest) = load_manifest(dir) {
        let chosen: Vec<String> = manifest
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.file.clone())
            .collect();
        if chosen.is_empty() {
            return Err(Error::Dataset(format!("manifest has no {split:?} entries")));
        }
        chosen
    } else {
        std::fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_lowercase().ends_with(".png") || n.to_lowercase().ends_with(".ppm"))
            .collect()
    };
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", dir.display())));
    }
    Ok(names
        .into_iter()
        .map(|file| DatasetFile {
            image_path: images.join(&file),
            mask_path: masks.join(&file),
            file,
        })
        .collect())
}

fn load_resized(entry: &DatasetFile, size: usize) -> Result<(Image, Mask)> {
    let image = load_image(&entry.image_path)?.resize(size, size);
    let mask = load_mask(&entry.mask_path)?.resize(size, size);
    Ok((image, mask))
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xc2b2ae3d27d4eb4f);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x ^ (x >> 31)
}

/// Mean per-image IoU at threshold 0.5.
pub fn evaluate<T: Scalar>(net: &SegNetwork<T>, samples: &[(Image, Mask)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    let mut acc = 0.0;
    for (image, mask) in samples {
        let out = forward(net, &tensor_from_image::<T>(image), false)?;
        let pred = PredMask::new(probs_2d(&out.probs)?)?;
        acc += metrics_from(confusion(&pred, mask, 0.5)?).iou;
    }
    Ok(acc / samples.len() as f64)
}

/// Full training run. Deterministic given the config seed; saves the
/// checkpoint with the best source-validation IoU plus a JSON-lines run log.
pub fn train_loop<T: Scalar>(
    cfg: &TrainConfig,
    train_dir: &Path,
    val_dir: &Path,
    out_dir: &Path,
) -> Result<(Checkpoint, RunLog)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_files = list_samples(train_dir, Split::Train)?;
    let val_files = list_samples(val_dir, Split::Val)?;
    let train_data: Vec<(Image, Mask)> = train_files
        .iter()
        .map(|f| load_resized(f, cfg.input_size))
        .collect::<Result<_>>()?;
    let val_data: Vec<(Image, Mask)> = val_files
        .iter()
        .map(|f| load_resized(f, cfg.input_size))
        .collect::<Result<_>>()?;

    let mut net: SegNetwork<T> = crate::segnet::build(cfg.widths, cfg.seed);
    let mut isw_state = IswState::<T>::new(NUM_HOOKED_LAYERS, cfg.warmup_epochs, cfg.seed);
    isw_state.recluster_each_epoch = cfg.isw_recluster;
    let cache = GridCache::new();
    let n = train_data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA11C, 0));
    let mut step = 0usize;
    let mut best_iou = f64::NEG_INFINITY;
    let mut best: Option<Checkpoint> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let log_path = out_dir.join("runlog.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let config_path = out_dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(&config_path, e))?;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let (mut e_task, mut e_slic, mut e_isw) = (0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    let (image, mask) = &train_data[i];
                    let gseed = derive_seed(cfg.seed, epoch as u64, (i as u64) << 1);
                    let (image, mask) = geometric_augment(image, mask, &cfg.geometric, gseed);
                    TrainSample {
                        image,
                        mask,
                        pair_seed: derive_seed(cfg.seed, epoch as u64, (i as u64) << 1 | 1),
                    }
                })
                .collect();
            let out = total_loss(&net, &batch, cfg, &mut isw_state, epoch, &cache)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
            let lr = poly_lr(cfg.lr0, step, total_steps, cfg.power)?;
            net.apply_step(&out.grads, T::of_f64(lr))?;
            step += 1;
            last_lr = lr;
            let w = chunk.len() as f64 / n as f64;
            e_task += out.breakdown.task * w;
            e_slic += out.breakdown.slic * w;
            e_isw += out.breakdown.isw * w;
        }
        let val_iou = evaluate(&net, &val_data)?;
        if val_iou > best_iou {
            best_iou = val_iou;
            let mut ck = Checkpoint::from_network(
                &net,
                CheckpointMeta {
                    epoch: epoch as u64,
                    config_hash: cfg.hash(),
                    rng_seed: cfg.seed,
                },
            );
            attach_isw_tensors(&mut ck, &isw_state);
            ck.save(&out_dir.join("best.supw"))?;
            best = Some(ck);
        }
        let record = EpochRecord {
            epoch,
            l_task: e_task,
            l_slic: e_slic,
            l_isw: e_isw,
            lr: last_lr,
            val_iou,
            wall_s: started.elapsed().as_secs_f64(),
        };
        use std::io::Write;
        writeln!(log_file, "{}", serde_json::to_string(&record)?)
            .map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
    }
    let log = RunLog {
        config: cfg.clone(),
        records,
    };
    Ok((best.expect("epochs >= 1 saves a checkpoint"), log))
}

/// Frozen style masks and accumulated variance maps, stored alongside the
/// weights for inspection.
fn attach_isw_tensors<T: Scalar>(ck: &mut Checkpoint, state: &IswState<T>) {
    for layer in 0..state.num_layers() {
        if let Some(mask) = state.mask(layer) {
            let data: Vec<f32> = mask.data.iter().map(|&m| m as f32).collect();
            ck.tensors.push((
                format!("isw.mask{layer}"),
                Tensor::from_vec(&[mask.dim, mask.dim], data).expect("square mask"),
            ));
        }
        if let Some(v) = state.mean_variance(layer) {
            let data: Vec<f32> = v.mat.data().iter().map(|&x| x.as_f64() as f32).collect();
            ck.tensors.push((
                format!("isw.var{layer}"),
                Tensor::from_vec(&[v.dim, v.dim], data).expect("square map"),
            ));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub parameter: String,
    pub value: String,
    pub fixed: String,
    pub source_iou: f64,
    pub target_iou: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

/// One-at-a-time sweep over the consistency weight, the superpixel count,
/// and the compactness, with row-specific fixed values. Source IoU comes
/// from the validation split, target IoU from the target test split; the
/// best row per parameter (by source IoU) is marked.
pub fn grid_search<T: Scalar>(
    base_cfg: &TrainConfig,
    source_dir: &Path,
    target_dir: &Path,
    out_dir: &Path,
) -> Result<GridTable> {
    struct RowSpec {
        parameter: &'static str,
        value: String,
        fixed: &'static str,
        apply: Box<dyn Fn(&mut TrainConfig)>,
    }
    let mut specs: Vec<RowSpec> = Vec::new();
    for w in [0.5, 0.75, 1.0] {
        specs.push(RowSpec {
            parameter: "lambda",
            value: format!("{}%", (w * 100.0) as u32),
            fixed: "k = 100, m = 40",
            apply: Box::new(move |c| {
                c.slic_weight = w;
                c.slic_k = 100;
                c.slic_m = 40.0;
            }),
        });
    }
    for k in [50usize, 150, 500, 1000] {
        specs.push(RowSpec {
            parameter: "k",
            value: k.to_string(),
            fixed: "lambda = 75%, m = 40",
            apply: Box::new(move |c| {
                c.slic_weight = 0.75;
                c.slic_k = k;
                c.slic_m = 40.0;
            }),
        });
    }
    for m in [20.0, 30.0, 50.0] {
        specs.push(RowSpec {
            parameter: "m",
            value: m.to_string(),
            fixed: "lambda = 75%, k = 100",
            apply: Box::new(move |c| {
                c.slic_weight = 0.75;
                c.slic_k = 100;
                c.slic_m = m;
            }),
        });
    }

    let target_files = list_samples(target_dir, Split::Test)?;
    let target_data: Vec<(Image, Mask)> = target_files
        .iter()
        .map(|f| load_resized(f, base_cfg.input_size))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut cfg = base_cfg.clone();
        (spec.apply)(&mut cfg);
        cfg.validate()?;
        let run_dir = out_dir.join(format!("grid_{i:02}_{}_{}", spec.parameter, spec.value.replace('%', "pct")));
        let (ck, log) = train_loop::<T>(&cfg, source_dir, source_dir, &run_dir)?;
        let source_iou = log
            .records
            .iter()
            .map(|r| r.val_iou)
            .fold(f64::NEG_INFINITY, f64::max);
        let net: SegNetwork<T> = ck.to_network()?;
        let target_iou = evaluate(&net, &target_data)?;
        rows.push(GridRow {
            parameter: spec.parameter.to_string(),
            value: spec.value.clone(),
            fixed: spec.fixed.to_string(),
            source_iou,
            target_iou,
            best: false,
        });
    }
    for param in ["lambda", "k", "m"] {
        let best_idx = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.parameter == param)
            .max_by(|a, b| a.1.source_iou.total_cmp(&b.1.source_iou))
            .map(|(i, _)| i);
        if let Some(i) = best_idx {
            rows[i].best = true;
        }
    }
    let table = GridTable { rows };
    let json_path = out_dir.join("grid.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let txt_path = out_dir.join("grid.txt");
    std::fs::write(&txt_path, format_grid(&table)).map_err(|e| Error::io(&txt_path, e))?;
    Ok(table)
}

/// Gradient-verification suite: every differentiable loss plus the full
/// objective through the network on a 16x16 input, against central finite
/// differences (64-bit, h = 1e-5, rel tol 1e-3).
pub fn gradient_suite() -> Result<Vec<(String, crate::numerics::GradCheckReport)>> {
    use crate::numerics::{gradcheck, GradPair};
    use crate::slic_loss::l_sg;
    use crate::whitening::{dwt_loss, CovMatrix, StyleMask};

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let mask = Mask {
        width: 4,
        height: 4,
        data: (0..16).map(|i| (i % 3 == 0) as u8).collect(),
    };
    let probs = Tensor::from_vec(
        &[4, 4],
        (0..16).map(|_| rng.gen_range(0.1..0.9)).collect(),
    )?;
    out.push((
        "bce".to_string(),
        gradcheck(|p: &Tensor<f64>| bce(&mask, p, 1e-7), &probs, 1e-5, 1e-3)?,
    ));

    let (image, _) = crate::synthdata::gen_sample(&crate::synthdata::source_preset(), 16, 1)?;
    let cache = GridCache::new();
    let grid = cache.get_or_compute(&image, &SlicParams::new(12, 40.0))?;
    let probs = Tensor::from_vec(
        &[16, 16],
        (0..256).map(|_| rng.gen_range(0.05..0.95)).collect(),
    )?;
    out.push((
        "l_sg (soft)".to_string(),
        gradcheck(
            |p: &Tensor<f64>| l_sg(p, &grid, 0.9, LsgMode::Soft),
            &probs,
            1e-5,
            1e-3,
        )?,
    ));

    let dim = 5usize;
    let mut cov_data = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let v = if i == j { 1.3 } else { rng.gen_range(0.2..0.8) };
            cov_data[i * dim + j] = v;
            cov_data[j * dim + i] = v;
        }
    }
    let cov = Tensor::from_vec(&[dim, dim], cov_data)?;
    out.push((
        "dwt_loss".to_string(),
        gradcheck(
            |m: &Tensor<f64>| Ok(dwt_loss(&CovMatrix::from_tensor(m.clone())?)),
            &cov,
            1e-5,
            1e-3,
        )?,
    ));

    let mut style = StyleMask::empty(dim);
    for (i, j) in [(0, 1), (1, 3), (2, 4)] {
        style.data[i * dim + j] = 1;
        style.data[j * dim + i] = 1;
        style.n_high += 1;
    }
    out.push((
        "isw_loss".to_string(),
        gradcheck(
            |m: &Tensor<f64>| isw_loss(&CovMatrix::from_tensor(m.clone())?, &style),
            &cov,
            1e-5,
            1e-3,
        )?,
    ));

    // end-to-end: every parameter of a small net under the full objective
    let cfg = TrainConfig {
        epochs: 1,
        input_size: 16,
        widths: [4, 4, 4],
        slic_k: 12,
        warmup_epochs: 0,
        jitter: PhotometricParams::identity(),
        ..TrainConfig::default()
    };
    let net: SegNetwork<f64> = crate::segnet::build(cfg.widths, 7);
    let (image, gt) = crate::synthdata::gen_sample(&crate::synthdata::source_preset(), 16, 2)?;
    let batch = [TrainSample {
        image,
        mask: gt,
        pair_seed: 5,
    }];
    // freeze the style masks so all finite-difference evaluations share state
    let mut state = IswState::new(NUM_HOOKED_LAYERS, 0, cfg.seed);
    total_loss(&net, &batch, &cfg, &mut state, 0, &cache)?;
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
    for (idx, name) in names.iter().enumerate() {
        let base = net.param(name).expect("listed above").clone();
        let report = gradcheck(
            |p: &Tensor<f64>| {
                let mut n2 = net.clone();
                *n2.param_mut(name).expect("listed above") = p.clone();
                let mut st = state.clone();
                let res = total_loss(&n2, &batch, &cfg, &mut st, 1, &cache)?;
                let g = res.grads[idx].clone();
                Ok(GradPair::new(
                    Tensor::scalar(res.breakdown.total),
                    Box::new(move |go| vec![g.map(|v| v * go.item())]),
                ))
            },
            &base,
            1e-5,
            1e-3,
        )?;
        out.push((format!("L_total d/d {name}"), report));
    }
    Ok(out)
}

pub fn format_grid(table: &GridTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<8} {:<22} {:>12} {:>12} {:>6}\n",
        "parameter", "value", "fixed", "source IoU", "target IoU", "best"
    ));
    for r in &table.rows {
        out.push_str(&format!(
            "{:<10} {:<8} {:<22} {:>12.4} {:>12.4} {:>6}\n",
            r.parameter,
            r.value,
            r.fixed,
            r.source_iou,
            r.target_iou,
            if r.best { "*" } else { "" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_mask;
    use crate::synthdata::{gen_dataset, gen_sample, source_preset};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            input_size: 32,
            widths: [4, 4, 4],
            slic_k: 40,
            warmup_epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_samples(n: usize, size: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let (image, mask) = gen_sample(&source_preset(), size, i as u64).unwrap();
                TrainSample {
                    image,
                    mask,
                    pair_seed: 100 + i as u64,
                }
            })
            .collect()
    }

    #[test]
    fn poly_lr_schedule() {
        assert_eq!(poly_lr(1e-2, 0, 100, 0.9).unwrap(), 1e-2);
        assert_eq!(poly_lr(1e-2, 100, 100, 0.9).unwrap(), 0.0);
        let mid = poly_lr(1e-2, 50, 100, 0.9).unwrap();
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.005359).abs() < 1e-6);
        assert!(poly_lr(1e-2, 101, 100, 0.9).is_err());
        // monotone non-increasing
        let mut prev = f64::INFINITY;
        for s in 0..=10 {
            let lr = poly_lr(1e-2, s, 10, 0.9).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn combine_total_arithmetic() {
        let b = combine_total(0.5, &[0.1, 0.2, 0.3], 0.2, 0.6);
        assert!((b.total - 1.06).abs() < 1e-12);
        assert!((b.task + b.isw + b.slic - b.total).abs() < 1e-12);
    }

    #[test]
    fn baseline_flags_give_task_only() {
        let cfg = TrainConfig {
            use_slic_loss: false,
            use_isw: false,
            ..tiny_cfg()
        };
        let net: SegNetwork<f64> = crate::segnet::build(cfg.widths, 3);
        let mut state = IswState::new(NUM_HOOKED_LAYERS, cfg.warmup_epochs, cfg.seed);
        let cache = GridCache::new();
        let batch = tiny_samples(2, 32);
        let out = total_loss(&net, &batch, &cfg, &mut state, 0, &cache).unwrap();
        assert_eq!(out.breakdown.slic, 0.0);
        assert_eq!(out.breakdown.isw, 0.0);
        assert_eq!(out.breakdown.total, out.breakdown.task);
        // matches a direct task-loss evaluation
        let mut direct = 0.0;
        for s in &batch {
            let fwd = forward(&net, &tensor_from_image::<f64>(&s.image), false).unwrap();
            let probs = probs_2d(&fwd.probs).unwrap();
            direct += bce(&s.mask, &probs, 1e-7).unwrap().value.item() / batch.len() as f64;
        }
        assert!((out.breakdown.task - direct).abs() < 1e-15);
    }

    #[test]
    fn isw_zero_during_warmup_nonzero_after() {
        let cfg = TrainConfig {
            use_slic_loss: false,
            warmup_epochs: 2,
            ..tiny_cfg()
        };
        let net: SegNetwork<f64> = crate::segnet::build(cfg.widths, 5);
        let mut state = IswState::new(NUM_HOOKED_LAYERS, cfg.warmup_epochs, cfg.seed);
        let cache = GridCache::new();
        let batch = tiny_samples(2, 32);
        for epoch in 0..2 {
            let out = total_loss(&net, &batch, &cfg, &mut state, epoch, &cache).unwrap();
            assert_eq!(out.breakdown.isw, 0.0, "warm-up epoch {epoch}");
        }
        let out = total_loss(&net, &batch, &cfg, &mut state, 2, &cache).unwrap();
        assert!(out.breakdown.isw > 0.0);
        assert_eq!(out.breakdown.isw_per_layer.len(), NUM_HOOKED_LAYERS);
        let sum: f64 = out.breakdown.isw_per_layer.iter().sum();
        assert!((out.breakdown.isw - cfg.isw_lambda * sum).abs() < 1e-12);
        assert!(
            (out.breakdown.task + out.breakdown.isw + out.breakdown.slic - out.breakdown.total)
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn full_objective_gradient_matches_fd() {
        use crate::numerics::{gradcheck, GradPair};
        let cfg = TrainConfig {
            epochs: 1,
            input_size: 16,
            widths: [4, 4, 4],
            slic_k: 12,
            warmup_epochs: 0,
            jitter: PhotometricParams::identity(),
            ..TrainConfig::default()
        };
        let net: SegNetwork<f64> = crate::segnet::build(cfg.widths, 9);
        let batch = tiny_samples(1, 16);
        let cache = GridCache::new();
        // freeze masks once so every FD evaluation sees the same state
        let mut state = IswState::new(NUM_HOOKED_LAYERS, 0, cfg.seed);
        total_loss(&net, &batch, &cfg, &mut state, 0, &cache).unwrap();
        for (pi, name) in ["enc0.weight", "enc2.bias", "head.weight"]
            .iter()
            .enumerate()
        {
            let _ = pi;
            let idx = net
                .params()
                .iter()
                .position(|(n, _)| n == name)
                .unwrap();
            let base = net.param(name).unwrap().clone();
            let rep = gradcheck(
                |p: &Tensor<f64>| {
                    let mut n2 = net.clone();
                    *n2.param_mut(name).unwrap() = p.clone();
                    let mut st = state.clone();
                    let out = total_loss(&n2, &batch, &cfg, &mut st, 1, &cache)?;
                    let g = out.grads[idx].clone();
                    Ok(GradPair::new(
                        Tensor::scalar(out.breakdown.total),
                        Box::new(move |go| vec![g.map(|v| v * go.item())]),
                    ))
                },
                &base,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed, "{name}: {rep}");
        }
    }

    #[test]
    fn zero_lr_step_is_identity() {
        let mut net: SegNetwork<f64> = crate::segnet::build([4, 4, 4], 1);
        let before: Vec<Vec<f64>> = net.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let grads: Vec<Tensor<f64>> = net
            .params()
            .iter()
            .map(|(_, t)| Tensor::filled(t.shape(), 3.5))
            .collect();
        net.apply_step(&grads, 0.0).unwrap();
        for ((_, t), b) in net.params().iter().zip(&before) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn train_loop_smoke_and_determinism() {
        let data = tempfile::tempdir().unwrap();
        gen_dataset(&source_preset(), 10, 32, data.path(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let out_a = tempfile::tempdir().unwrap();
        let (ck, log) = train_loop::<f64>(&cfg, data.path(), data.path(), out_a.path()).unwrap();
        assert_eq!(log.records.len(), 2);
        assert!(out_a.path().join("best.supw").exists());
        assert!(out_a.path().join("runlog.jsonl").exists());
        assert_eq!(ck.meta.config_hash, cfg.hash());
        for (i, r) in log.records.iter().enumerate() {
            assert_eq!(r.epoch, i);
            assert!(r.l_task.is_finite() && r.val_iou.is_finite());
        }
        let out_b = tempfile::tempdir().unwrap();
        let (_, log_b) = train_loop::<f64>(&cfg, data.path(), data.path(), out_b.path()).unwrap();
        for (a, b) in log.records.iter().zip(&log_b.records) {
            assert_eq!(a.l_task, b.l_task);
            assert_eq!(a.l_slic, b.l_slic);
            assert_eq!(a.l_isw, b.l_isw);
            assert_eq!(a.val_iou, b.val_iou);
        }
    }

    #[test]
    fn train_loop_rejects_empty_dataset() {
        let data = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(data.path().join("images")).unwrap();
        std::fs::create_dir_all(data.path().join("masks")).unwrap();
        let cfg = tiny_cfg();
        let out = tempfile::tempdir().unwrap();
        assert!(train_loop::<f64>(&cfg, data.path(), data.path(), out.path()).is_err());
    }

    #[test]
    fn list_samples_plain_directory() {
        let data = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(data.path().join("images")).unwrap();
        std::fs::create_dir_all(data.path().join("masks")).unwrap();
        let (image, mask) = gen_sample(&source_preset(), 32, 0).unwrap();
        crate::imaging::save_image(&image, &data.path().join("images/a.png")).unwrap();
        save_mask(&mask, &data.path().join("masks/a.png")).unwrap();
        let train = list_samples(data.path(), Split::Train).unwrap();
        let val = list_samples(data.path(), Split::Val).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(val.len(), 1);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(TrainConfig::from_json_file(&path).unwrap(), cfg);
        // partial config files fill in defaults
        std::fs::write(&path, r#"{"epochs": 7, "slic_weight": 0.5}"#).unwrap();
        let partial = TrainConfig::from_json_file(&path).unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.slic_weight, 0.5);
        assert_eq!(partial.lr0, 1e-2);
        // invalid values rejected
        std::fs::write(&path, r#"{"slic_weight": 1.5}"#).unwrap();
        assert!(TrainConfig::from_json_file(&path).is_err());
    }
}
