//! Saliency evaluation: MAE, thresholded precision/recall with maximum
//! F-measure, and the enhanced-alignment E-measure, per image and aggregated
//! over datasets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
pub const DEFAULT_BETA_SQUARED: f64 = 0.3;
pub const GT_BINARIZATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EMeasureMode {
    /// Maximum over the 256 binarization thresholds.
    Max,
    /// Single threshold at twice the prediction mean.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FMeasureProtocol {
    /// Average P and R per threshold across the dataset, then take max F.
    DatasetPooled,
    /// Average per-image F curves across the dataset, then take the max.
    PerImage,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn check_unit_range<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    for &v in t.data() {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::arg(op, format!("value {f} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Mean absolute error between two probability maps.
pub fn mae<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("mae", pred.shape(), gt.shape()));
    }
    check_unit_range("mae", pred)?;
    check_unit_range("mae", gt)?;
    let mut acc = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        acc += (p.to_f64() - g.to_f64()).abs();
    }
    Ok(acc / pred.numel() as f64)
}

/// Per-threshold true positives, false positives, and false negatives for
/// pred >= k/255 against the binarized ground truth.
pub fn threshold_counts<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
) -> Result<Vec<(usize, usize, usize)>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("pr_curve", pred.shape(), gt.shape()));
    }
    let gt_bin: Vec<bool> = gt
        .data()
        .iter()
        .map(|&g| g.to_f64() >= GT_BINARIZATION)
        .collect();
    let positives = gt_bin.iter().filter(|&&b| b).count();
    let pred_f: Vec<f64> = pred.data().iter().map(|&p| p.to_f64()).collect();

    let mut counts = Vec::with_capacity(THRESHOLDS);
    for k in 0..THRESHOLDS {
        let t = k as f64 / 255.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&p, &g) in pred_f.iter().zip(&gt_bin) {
            if p >= t {
                if g {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        counts.push((tp, fp, positives - tp));
    }
    Ok(counts)
}

/// Precision and recall at the 256 thresholds k/255. Empty predictions give
/// precision 1, empty ground truth gives recall 1.
pub fn pr_curve<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<(Vec<f64>, Vec<f64>)> {
    let counts = threshold_counts(pred, gt)?;
    let mut precision = Vec::with_capacity(THRESHOLDS);
    let mut recall = Vec::with_capacity(THRESHOLDS);
    for (tp, fp, fne) in counts {
        precision.push(if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
        let positives = tp + fne;
        recall.push(if positives == 0 {
            1.0
        } else {
            tp as f64 / positives as f64
        });
    }
    Ok((precision, recall))
}

/// max over thresholds of (1 + b^2) P R / (b^2 P + R), zero where the
/// denominator vanishes.
pub fn max_f_measure(precision: &[f64], recall: &[f64], beta_squared: f64) -> f64 {
    precision
        .iter()
        .zip(recall)
        .map(|(&p, &r)| {
            let denom = beta_squared * p + r;
            if denom == 0.0 {
                0.0
            } else {
                (1.0 + beta_squared) * p * r / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Enhanced alignment between a binarized prediction and binary ground
/// truth, with the degenerate all-background / all-foreground conventions.
fn e_measure_at(pred_bin: &[bool], gt_bin: &[bool]) -> f64 {
    let n = pred_bin.len() as f64;
    let gt_ones = gt_bin.iter().filter(|&&b| b).count();
    let pred_mean = pred_bin.iter().filter(|&&b| b).count() as f64 / n;
    if gt_ones == 0 {
        return 1.0 - pred_mean;
    }
    if gt_ones == gt_bin.len() {
        return pred_mean;
    }
    let gt_mean = gt_ones as f64 / n;
    let mut acc = 0.0;
    for (&p, &g) in pred_bin.iter().zip(gt_bin) {
        let phi_p = (p as u8 as f64) - pred_mean;
        let phi_g = (g as u8 as f64) - gt_mean;
        let denom = phi_g * phi_g + phi_p * phi_p;
        let xi = if denom == 0.0 {
            0.0
        } else {
            2.0 * phi_g * phi_p / denom
        };
        acc += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    acc / n
}

/// E-measure curve over the 256 thresholds.
pub fn e_measure_curve<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("e_measure", pred.shape(), gt.shape()));
    }
    let gt_bin: Vec<bool> = gt
        .data()
        .iter()
        .map(|&g| g.to_f64() >= GT_BINARIZATION)
        .collect();
    let pred_f: Vec<f64> = pred.data().iter().map(|&p| p.to_f64()).collect();
    Ok((0..THRESHOLDS)
        .map(|k| {
            let t = k as f64 / 255.0;
            let pred_bin: Vec<bool> = pred_f.iter().map(|&p| p >= t).collect();
            e_measure_at(&pred_bin, &gt_bin)
        })
        .collect())
}

pub fn e_measure<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, mode: EMeasureMode) -> Result<f64> {
    match mode {
        EMeasureMode::Max => Ok(e_measure_curve(pred, gt)?.into_iter().fold(0.0, f64::max)),
        EMeasureMode::Adaptive => {
            if pred.shape() != gt.shape() {
                return Err(Error::shape("e_measure", pred.shape(), gt.shape()));
            }
            let n = pred.numel() as f64;
            let mean: f64 = pred.data().iter().map(|&p| p.to_f64()).sum::<f64>() / n;
            let t = (2.0 * mean).min(1.0);
            let pred_bin: Vec<bool> = pred.data().iter().map(|&p| p.to_f64() >= t).collect();
            let gt_bin: Vec<bool> = gt
                .data()
                .iter()
                .map(|&g| g.to_f64() >= GT_BINARIZATION)
                .collect();
            Ok(e_measure_at(&pred_bin, &gt_bin))
        }
    }
}

/// All metrics for one prediction/ground-truth pair.
pub fn evaluate_pair<S: Scalar>(
    pred: &Tensor<S>,
    gt: &Tensor<S>,
    beta_squared: f64,
    e_mode: EMeasureMode,
) -> Result<MetricReport> {
    let (precision, recall) = pr_curve(pred, gt)?;
    Ok(MetricReport {
        mae: mae(pred, gt)?,
        f_max: max_f_measure(&precision, &recall, beta_squared),
        e_max: e_measure(pred, gt, e_mode)?,
        precision,
        recall,
    })
}

// ---- dataset evaluation ------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ImageRow {
    pub image: String,
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub n_images: usize,
    #[serde(skip)]
    pub rows: Vec<ImageRow>,
    #[serde(skip)]
    pub precision: Vec<f64>,
    #[serde(skip)]
    pub recall: Vec<f64>,
}

pub struct EvalOptions {
    pub beta_squared: f64,
    pub e_mode: EMeasureMode,
    pub f_protocol: FMeasureProtocol,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beta_squared: DEFAULT_BETA_SQUARED,
            e_mode: EMeasureMode::Max,
            f_protocol: FMeasureProtocol::DatasetPooled,
        }
    }
}

/// One named prediction/ground-truth pair in a dataset evaluation.
pub struct EvalPair<S: Scalar> {
    pub name: String,
    pub pred: Tensor<S>,
    pub gt: Tensor<S>,
}

/// Aggregate metrics over a dataset: MAE averaged per image, PR accumulated
/// per threshold before the max-F, E averaged per threshold before the max.
pub fn evaluate_dataset<S: Scalar>(
    pairs: &[EvalPair<S>],
    opts: &EvalOptions,
) -> Result<DatasetReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no prediction/ground-truth pairs".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut pooled_p = vec![0.0; THRESHOLDS];
    let mut pooled_r = vec![0.0; THRESHOLDS];
    let mut pooled_f = vec![0.0; THRESHOLDS];
    let mut pooled_e = vec![0.0; THRESHOLDS];
    let mut mae_sum = 0.0;

    for pair in pairs {
        let (p, r) = pr_curve(&pair.pred, &pair.gt)?;
        let m =
            mae(&pair.pred, &pair.gt).map_err(|e| Error::Data(format!("{}: {e}", pair.name)))?;
        let e_curve = e_measure_curve(&pair.pred, &pair.gt)?;
        let f_img = max_f_measure(&p, &r, opts.beta_squared);
        let e_img = match opts.e_mode {
            EMeasureMode::Max => e_curve.iter().cloned().fold(0.0, f64::max),
            EMeasureMode::Adaptive => e_measure(&pair.pred, &pair.gt, EMeasureMode::Adaptive)?,
        };
        rows.push(ImageRow {
            image: pair.name.clone(),
            mae: m,
            f_max: f_img,
            e_max: e_img,
        });
        mae_sum += m;
        for k in 0..THRESHOLDS {
            pooled_p[k] += p[k];
            pooled_r[k] += r[k];
            let denom = opts.beta_squared * p[k] + r[k];
            pooled_f[k] += if denom == 0.0 {
                0.0
            } else {
                (1.0 + opts.beta_squared) * p[k] * r[k] / denom
            };
            pooled_e[k] += e_curve[k];
        }
    }
    let n = pairs.len() as f64;
    for k in 0..THRESHOLDS {
        pooled_p[k] /= n;
        pooled_r[k] /= n;
        pooled_f[k] /= n;
        pooled_e[k] /= n;
    }
    let f_max = match opts.f_protocol {
        FMeasureProtocol::DatasetPooled => max_f_measure(&pooled_p, &pooled_r, opts.beta_squared),
        FMeasureProtocol::PerImage => pooled_f.iter().cloned().fold(0.0, f64::max),
    };
    let e_max = match opts.e_mode {
        EMeasureMode::Max => pooled_e.iter().cloned().fold(0.0, f64::max),
        EMeasureMode::Adaptive => rows.iter().map(|r| r.e_max).sum::<f64>() / n,
    };
    Ok(DatasetReport {
        mae: mae_sum / n,
        f_max,
        e_max,
        n_images: pairs.len(),
        rows,
        precision: pooled_p,
        recall: pooled_r,
    })
}

/// Pair saliency maps in `pred_dir` with ground-truth masks by file stem.
/// Every ground-truth entry must have a prediction; a missing one aborts the
/// evaluation, because silently skipping entries biases the averages.
pub fn pair_prediction_files(
    pred_dir: &Path,
    gt_files: &[(String, PathBuf)],
) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut out = Vec::with_capacity(gt_files.len());
    let mut seen = BTreeSet::new();
    for (name, gt_path) in gt_files {
        if !seen.insert(name.clone()) {
            return Err(Error::Data(format!(
                "duplicate ground-truth entry '{name}'"
            )));
        }
        let pred_path = pred_dir.join(format!("{name}.pgm"));
        if !pred_path.exists() {
            return Err(Error::Data(format!(
                "missing prediction for '{name}': expected {}",
                pred_path.display()
            )));
        }
        out.push((name.clone(), pred_path, gt_path.clone()));
    }
    Ok(out)
}

pub fn csv_report(report: &DatasetReport) -> String {
    let mut out = String::from("image,mae,f_max,e_max\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.image, row.mae, row.f_max, row.e_max
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;

    fn half_ones() -> Tensor<f64> {
        Tensor::from_fn(
            Shape::new(1, 1, 4, 4),
            |_, _, y, _| {
                if y < 2 {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    #[test]
    fn mae_identities() {
        let gt = half_ones();
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        let zeros = Tensor::<f64>::zeros(gt.shape());
        let ones = Tensor::<f64>::ones(gt.shape());
        assert_eq!(mae(&zeros, &ones).unwrap(), 1.0);
    }

    #[test]
    fn mae_complement_symmetry() {
        let mut r = crate::rng::seeded(1);
        let shape = Shape::new(1, 1, 8, 8);
        let pred = Tensor::<f64>::from_fn(shape, |_, _, _, _| rand::Rng::random(&mut r));
        let gt = Tensor::<f64>::from_fn(shape, |_, _, _, _| rand::Rng::random(&mut r));
        let a = mae(&pred, &gt).unwrap();
        let b = mae(&pred.map(|v| 1.0 - v), &gt.map(|v| 1.0 - v)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn perfect_binary_prediction_has_unit_pr() {
        let gt = half_ones();
        let (p, r) = pr_curve(&gt, &gt).unwrap();
        // At t = 0 every pixel is selected, so precision is the foreground
        // fraction; every positive threshold separates perfectly.
        assert_eq!(p[0], 0.5);
        for k in 1..=255 {
            assert_eq!(p[k], 1.0, "precision at {k}");
        }
        for k in 0..=255 {
            assert_eq!(r[k], 1.0, "recall at {k}");
        }
    }

    #[test]
    fn constant_prediction_against_half_ones() {
        let gt = half_ones();
        let pred = Tensor::<f64>::full(gt.shape(), 0.4);
        let (p, r) = pr_curve(&pred, &gt).unwrap();
        for k in 0..=255 {
            let t = k as f64 / 255.0;
            if t <= 0.4 {
                assert_eq!(p[k], 0.5, "precision at {k}");
                assert_eq!(r[k], 1.0, "recall at {k}");
            } else {
                assert_eq!(p[k], 1.0, "empty-prediction precision at {k}");
                assert_eq!(r[k], 0.0, "recall at {k}");
            }
        }
    }

    #[test]
    fn recall_is_nonincreasing_in_threshold() {
        let mut rng = crate::rng::seeded(2);
        let shape = Shape::new(1, 1, 8, 8);
        for _ in 0..20 {
            let pred = Tensor::<f64>::from_fn(shape, |_, _, _, _| rand::Rng::random(&mut rng));
            let gt = Tensor::<f64>::from_fn(shape, |_, _, _, _| {
                if rand::Rng::random::<f64>(&mut rng) > 0.5 {
                    1.0
                } else {
                    0.0
                }
            });
            let (_, r) = pr_curve(&pred, &gt).unwrap();
            for w in r.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn f_measure_corner_cases() {
        assert_eq!(max_f_measure(&[1.0; 256], &[1.0; 256], 0.3), 1.0);
        assert_eq!(max_f_measure(&[1.0; 256], &[0.0; 256], 0.3), 0.0);
    }

    #[test]
    fn e_measure_of_perfect_and_complement() {
        let gt = half_ones();
        assert!((e_measure(&gt, &gt, EMeasureMode::Max).unwrap() - 1.0).abs() < 1e-12);

        // Complement of a half/half image at threshold sweep: the best
        // threshold is the degenerate all-or-nothing one, where alignment is
        // 0.5; at matching thresholds the alignment is exactly 0.
        let comp = gt.map(|v| 1.0 - v);
        let curve = e_measure_curve(&comp, &gt).unwrap();
        assert!((curve[128] - 0.0).abs() < 1e-12, "{}", curve[128]);
    }

    #[test]
    fn adaptive_mode_uses_twice_mean_threshold() {
        let gt = half_ones();
        let pred = gt.map(|v| 0.4 * v);
        let e = e_measure(&pred, &gt, EMeasureMode::Adaptive).unwrap();
        // threshold = 2 * 0.2 = 0.4, binarizing exactly to the gt.
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_of_perfect_predictions_scores_perfectly() {
        let gt = half_ones();
        let pairs: Vec<EvalPair<f64>> = (0..3)
            .map(|i| EvalPair {
                name: format!("img{i}"),
                pred: gt.clone(),
                gt: gt.clone(),
            })
            .collect();
        let report = evaluate_dataset(&pairs, &EvalOptions::default()).unwrap();
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.f_max, 1.0);
        assert!((report.e_max - 1.0).abs() < 1e-12);
        assert_eq!(report.n_images, 3);
    }

    #[test]
    fn dataset_mae_is_mean_of_per_image_maes() {
        let gt = half_ones();
        let a = EvalPair {
            name: "a".into(),
            pred: gt.clone(),
            gt: gt.clone(),
        };
        let b = EvalPair {
            name: "b".into(),
            pred: gt.map(|v| 1.0 - v),
            gt: gt.clone(),
        };
        let report = evaluate_dataset(&[a, b], &EvalOptions::default()).unwrap();
        assert!((report.mae - 0.5).abs() < 1e-12);
        let csv = csv_report(&report);
        assert!(csv.starts_with("image,mae,f_max,e_max\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn missing_prediction_is_a_named_error() {
        let dir = tempfile::tempdir().unwrap();
        let gt_files = vec![("sample7".to_string(), dir.path().join("sample7.pgm"))];
        let err = pair_prediction_files(dir.path(), &gt_files).unwrap_err();
        assert!(err.to_string().contains("sample7"), "{err}");
    }
}
