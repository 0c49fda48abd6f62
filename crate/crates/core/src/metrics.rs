//! Pixel-level segmentation metrics: confusion counts, IoU / precision /
//! recall / accuracy, and per-dataset mean +/- standard deviation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_mask, Mask};
use crate::scalar::Scalar;
use crate::slic_loss::PredMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
    pub tn: usize,
}

/// Binarizes the prediction at `threshold` (p >= threshold counts as lesion)
/// and tallies against the ground truth.
pub fn confusion<T: Scalar>(pred: &PredMask<T>, gt: &Mask, threshold: f64) -> Result<Confusion> {
    let s = pred.probs.shape();
    if s[0] != gt.height || s[1] != gt.width {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {}x{}",
            s, gt.height, gt.width
        )));
    }
    let thr = T::of_f64(threshold);
    let mut c = Confusion::default();
    for (&p, &g) in pred.probs.data().iter().zip(&gt.data) {
        match (p >= thr, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Empty-denominator convention: a metric whose denominator is zero is 1.0
/// when both the prediction and the ground truth are empty, else 0.0.
pub fn metrics_from(c: Confusion) -> Metrics {
    let pred_empty = c.tp + c.fp == 0;
    let gt_empty = c.tp + c.r#fn == 0;
    let ratio = |num: usize, den: usize, other_empty: bool| -> f64 {
        if den == 0 {
            if other_empty {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    let total = c.tp + c.fp + c.r#fn + c.tn;
    Metrics {
        iou: ratio(c.tp, c.tp + c.fp + c.r#fn, true),
        precision: ratio(c.tp, c.tp + c.fp, gt_empty),
        recall: ratio(c.tp, c.tp + c.r#fn, pred_empty),
        accuracy: if total == 0 {
            1.0
        } else {
            (c.tp + c.tn) as f64 / total as f64
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub file: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_image: Vec<ImageMetrics>,
    pub mean: Metrics,
    pub std: Metrics,
    /// sigma estimator used for `std`
    pub sigma: String,
}

fn aggregate(values: &[Metrics]) -> (Metrics, Metrics) {
    let n = values.len() as f64;
    let pick = |f: fn(&Metrics) -> f64| -> (f64, f64) {
        let mean = values.iter().map(f).sum::<f64>() / n;
        let var = values.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (iou_m, iou_s) = pick(|m| m.iou);
    let (p_m, p_s) = pick(|m| m.precision);
    let (r_m, r_s) = pick(|m| m.recall);
    let (a_m, a_s) = pick(|m| m.accuracy);
    (
        Metrics {
            iou: iou_m,
            precision: p_m,
            recall: r_m,
            accuracy: a_m,
        },
        Metrics {
            iou: iou_s,
            precision: p_s,
            recall: r_s,
            accuracy: a_s,
        },
    )
}

pub fn report_from_metrics(per_image: Vec<ImageMetrics>) -> Result<Report> {
    if per_image.is_empty() {
        return Err(Error::Dataset("no pairs to evaluate".into()));
    }
    let values: Vec<Metrics> = per_image.iter().map(|m| m.metrics).collect();
    let (mean, std) = aggregate(&values);
    Ok(Report {
        per_image,
        mean,
        std,
        sigma: "population".into(),
    })
}

/// Evaluates filename-matched binary masks: every mask in `gt_dir` must have
/// a prediction of the same name in `pred_dir`.
pub fn dataset_report(pred_dir: &Path, gt_dir: &Path) -> Result<Report> {
    let mut names: Vec<String> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().to_lowercase();
            name.ends_with(".png") || name.ends_with(".ppm")
        })
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut per_image = Vec::with_capacity(names.len());
    for name in names {
        let gt = load_mask(&gt_dir.join(&name))?;
        let pred_path = pred_dir.join(&name);
        if !pred_path.exists() {
            return Err(Error::Dataset(format!("missing prediction for {name}")));
        }
        let pred_mask = load_mask(&pred_path)?;
        let pred = PredMask::new(pred_mask.to_tensor())?;
        let c = confusion(&pred, &gt, 0.5)?;
        per_image.push(ImageMetrics {
            file: name,
            metrics: metrics_from(c),
        });
    }
    report_from_metrics(per_image)
}

/// Aligned text table in IoU / Prec. / Rec. / Acc. column order.
pub fn format_report(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>14} {:>14} {:>14} {:>14}\n",
        "file", "IoU", "Prec.", "Rec.", "Acc."
    ));
    for im in &report.per_image {
        out.push_str(&format!(
            "{:<24} {:>14.4} {:>14.4} {:>14.4} {:>14.4}\n",
            im.file, im.metrics.iou, im.metrics.precision, im.metrics.recall, im.metrics.accuracy
        ));
    }
    let fmt = |m: f64, s: f64| format!("{m:.4} ± {s:.4}");
    out.push_str(&format!(
        "{:<24} {:>14} {:>14} {:>14} {:>14}\n",
        "mean ± σ",
        fmt(report.mean.iou, report.std.iou),
        fmt(report.mean.precision, report.std.precision),
        fmt(report.mean.recall, report.std.recall),
        fmt(report.mean.accuracy, report.std.accuracy),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_mask;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred_from_bits(w: usize, h: usize, bits: &[u8]) -> PredMask<f64> {
        PredMask::new(
            Tensor::from_vec(&[h, w], bits.iter().map(|&b| b as f64).collect()).unwrap(),
        )
        .unwrap()
    }

    fn mask_from_bits(w: usize, h: usize, bits: &[u8]) -> Mask {
        Mask {
            width: w,
            height: h,
            data: bits.to_vec(),
        }
    }

    #[test]
    fn confusion_perfect_and_inverted() {
        let bits = [1, 0, 1, 1, 0, 0, 1, 0, 1];
        let gt = mask_from_bits(3, 3, &bits);
        let c = confusion(&pred_from_bits(3, 3, &bits), &gt, 0.5).unwrap();
        assert_eq!((c.fp, c.r#fn), (0, 0));
        assert_eq!(c.tp, 5);
        assert_eq!(c.tp + c.fp + c.r#fn + c.tn, 9);
        let inv: Vec<u8> = bits.iter().map(|&b| 1 - b).collect();
        let c = confusion(&pred_from_bits(3, 3, &inv), &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn confusion_matches_per_pixel_count_on_random_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let gt_bits: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2u8)).collect();
            let pr_bits: Vec<u8> = (0..16).map(|_| rng.gen_range(0..2u8)).collect();
            let c = confusion(
                &pred_from_bits(4, 4, &pr_bits),
                &mask_from_bits(4, 4, &gt_bits),
                0.5,
            )
            .unwrap();
            let mut expect = Confusion::default();
            for i in 0..16 {
                match (pr_bits[i], gt_bits[i]) {
                    (1, 1) => expect.tp += 1,
                    (1, 0) => expect.fp += 1,
                    (0, 1) => expect.r#fn += 1,
                    _ => expect.tn += 1,
                }
            }
            assert_eq!(c, expect);
        }
    }

    #[test]
    fn confusion_rejects_dim_mismatch() {
        let gt = mask_from_bits(2, 2, &[0; 4]);
        assert!(confusion(&pred_from_bits(3, 3, &[0; 9]), &gt, 0.5).is_err());
    }

    #[test]
    fn metrics_basic_cases() {
        let m = metrics_from(Confusion {
            tp: 8,
            fp: 0,
            r#fn: 0,
            tn: 8,
        });
        assert_eq!(
            (m.iou, m.precision, m.recall, m.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        // prediction covers half of gt, no false positives
        let m = metrics_from(Confusion {
            tp: 4,
            fp: 0,
            r#fn: 4,
            tn: 8,
        });
        assert_eq!((m.recall, m.precision, m.iou), (0.5, 1.0, 0.5));
        let m = metrics_from(Confusion {
            tp: 6,
            fp: 2,
            r#fn: 2,
            tn: 6,
        });
        assert_eq!(
            (m.iou, m.precision, m.recall, m.accuracy),
            (0.6, 0.75, 0.75, 0.75)
        );
    }

    #[test]
    fn metrics_empty_denominator_convention() {
        // both empty -> 1.0
        let m = metrics_from(Confusion {
            tp: 0,
            fp: 0,
            r#fn: 0,
            tn: 9,
        });
        assert_eq!(
            (m.iou, m.precision, m.recall, m.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        // gt empty, prediction not
        let m = metrics_from(Confusion {
            tp: 0,
            fp: 3,
            r#fn: 0,
            tn: 6,
        });
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
        // prediction empty, gt not
        let m = metrics_from(Confusion {
            tp: 0,
            fp: 0,
            r#fn: 3,
            tn: 6,
        });
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_match_set_arithmetic_on_all_3x3_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for gt_code in 0..512u32 {
            let gt_bits: Vec<u8> = (0..9).map(|i| (gt_code >> i & 1) as u8).collect();
            for _ in 0..8 {
                let pr_code: u32 = rng.gen_range(0..512);
                let pr_bits: Vec<u8> = (0..9).map(|i| (pr_code >> i & 1) as u8).collect();
                let c = confusion(
                    &pred_from_bits(3, 3, &pr_bits),
                    &mask_from_bits(3, 3, &gt_bits),
                    0.5,
                )
                .unwrap();
                let m = metrics_from(c);
                // set-arithmetic oracle
                let inter = gt_bits
                    .iter()
                    .zip(&pr_bits)
                    .filter(|(&g, &p)| g == 1 && p == 1)
                    .count() as f64;
                let union = gt_bits
                    .iter()
                    .zip(&pr_bits)
                    .filter(|(&g, &p)| g == 1 || p == 1)
                    .count() as f64;
                let gt_n = gt_bits.iter().filter(|&&b| b == 1).count() as f64;
                let pr_n = pr_bits.iter().filter(|&&b| b == 1).count() as f64;
                let agree = gt_bits.iter().zip(&pr_bits).filter(|(g, p)| g == p).count() as f64;
                let expected_iou = if union == 0.0 { 1.0 } else { inter / union };
                let expected_prec = if pr_n == 0.0 {
                    if gt_n == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    inter / pr_n
                };
                let expected_rec = if gt_n == 0.0 {
                    if pr_n == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    inter / gt_n
                };
                assert_eq!(m.iou, expected_iou);
                assert_eq!(m.precision, expected_prec);
                assert_eq!(m.recall, expected_rec);
                assert_eq!(m.accuracy, agree / 9.0);
                if c.tp + c.fp + c.r#fn > 0 {
                    assert!(m.iou <= m.precision.min(m.recall) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn dataset_report_means_and_sigma() {
        let dir = tempfile::tempdir().unwrap();
        let (pred_dir, gt_dir) = (dir.path().join("pred"), dir.path().join("gt"));
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        // iou 0.4: gt has 5 positives, prediction hits 2 with no extras
        let gt_a = mask_from_bits(10, 1, &[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let pr_a = mask_from_bits(10, 1, &[1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        // iou 0.8: prediction hits 4 of the 5
        let gt_b = gt_a.clone();
        let pr_b = mask_from_bits(10, 1, &[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        save_mask(&gt_a, &gt_dir.join("a.png")).unwrap();
        save_mask(&pr_a, &pred_dir.join("a.png")).unwrap();
        save_mask(&gt_b, &gt_dir.join("b.png")).unwrap();
        save_mask(&pr_b, &pred_dir.join("b.png")).unwrap();
        let report = dataset_report(&pred_dir, &gt_dir).unwrap();
        assert_eq!(report.per_image.len(), 2);
        assert!((report.mean.iou - 0.6).abs() < 1e-12);
        assert!((report.std.iou - 0.2).abs() < 1e-12);
        assert_eq!(report.sigma, "population");
        // the table formats without panicking and includes headers
        let table = format_report(&report);
        assert!(table.contains("IoU") && table.contains("a.png"));
    }

    #[test]
    fn dataset_report_identical_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let (pred_dir, gt_dir) = (dir.path().join("p"), dir.path().join("g"));
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        let m = mask_from_bits(4, 2, &[1, 0, 1, 0, 0, 1, 0, 1]);
        for d in [&pred_dir, &gt_dir] {
            save_mask(&m, &d.join("x.png")).unwrap();
            save_mask(&m, &d.join("y.png")).unwrap();
        }
        let report = dataset_report(&pred_dir, &gt_dir).unwrap();
        assert_eq!(report.mean.iou, 1.0);
        assert_eq!(report.std.iou, 0.0);
    }

    #[test]
    fn dataset_report_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (pred_dir, gt_dir) = (dir.path().join("p"), dir.path().join("g"));
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        let err = dataset_report(&pred_dir, &gt_dir).unwrap_err();
        assert!(err.to_string().contains("no pairs"), "{err}");
        let m = mask_from_bits(2, 2, &[1, 0, 0, 1]);
        save_mask(&m, &gt_dir.join("only.png")).unwrap();
        let err = dataset_report(&pred_dir, &gt_dir).unwrap_err();
        assert!(err.to_string().contains("missing prediction"), "{err}");
    }
}
