//! Training objectives: windowed-max weight maps, weighted BCE/IoU/L1, SSIM
//! and Dice losses, the combined saliency and contour objectives, and
//! contour ground-truth derivation.
//!
//! Every term has an on-tape form (gradients flow to the logits) and a
//! value-level wrapper that runs it on a throwaway tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::kernels::pool;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA_WINDOW: usize = 31;
pub const CONTOUR_BCE_COEFF: f64 = 0.001;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// How per-pixel weights derive from the alpha map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// w = alpha, with a uniform fallback when the map sums to zero.
    Alpha,
    /// w = 1 + lambda * alpha.
    OnePlusLambdaAlpha(f64),
}

/// Denominator of the weighted means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    WeightSum,
    PixelCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_window: usize,
    pub weighting: Weighting,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_window: DEFAULT_ALPHA_WINDOW,
            weighting: Weighting::Alpha,
            normalization: Normalization::WeightSum,
        }
    }
}

/// Per-pixel loss weight field: the windowed maximum of the ground truth.
#[derive(Debug, Clone)]
pub struct AlphaMap<S: Scalar> {
    pub weights: Tensor<S>,
    pub window: usize,
}

/// alpha(i, j) = max of gt over the window x window neighborhood centered at
/// (i, j), zero padded at the borders.
pub fn alpha_map<S: Scalar>(gt: &Tensor<S>, window: usize) -> Result<AlphaMap<S>> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::arg(
            "alpha_map",
            format!("window must be odd and >= 1, got {window}"),
        ));
    }
    for &v in gt.data() {
        if v < S::ZERO || v > S::ONE {
            return Err(Error::arg("alpha_map", "ground truth must lie in [0, 1]"));
        }
    }
    let data = pool::windowed_max(gt.data(), gt.shape(), window)?;
    Ok(AlphaMap {
        weights: Tensor::from_vec(gt.shape(), data)?,
        window,
    })
}

/// Resolve the weight field, falling back to uniform weights when the alpha
/// map is all zero (empty ground truth).
pub fn effective_weights<S: Scalar>(alpha: &AlphaMap<S>, weighting: Weighting) -> Tensor<S> {
    match weighting {
        Weighting::Alpha => {
            if alpha.weights.sum() == S::ZERO {
                Tensor::ones(alpha.weights.shape())
            } else {
                alpha.weights.clone()
            }
        }
        Weighting::OnePlusLambdaAlpha(lambda) => {
            alpha.weights.map(|a| S::ONE + S::from_f64(lambda) * a)
        }
    }
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: Shape) -> Result<()> {
    if a.shape() != b {
        return Err(Error::shape(op, a.shape(), b));
    }
    Ok(())
}

fn per_pixel_coeff<S: Scalar>(w: &Tensor<S>, normalization: Normalization) -> Tensor<S> {
    let denom = match normalization {
        Normalization::WeightSum => w.sum(),
        Normalization::PixelCount => S::from_usize(w.numel()),
    };
    w.map(|v| v / denom)
}

// ---- individual terms, on tape ---------------------------------------------

/// Weighted binary cross-entropy on logits, numerically stable.
pub fn wbce_on<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    gt: &Tensor<S>,
    w: &Tensor<S>,
    normalization: Normalization,
) -> Result<Var> {
    check_same_shape("weighted_bce", gt, tape.shape(logits))?;
    let coeff = per_pixel_coeff(w, normalization);
    tape.weighted_bce_with_logits(logits, gt, &coeff)
}

/// Weighted IoU loss with +1 smoothing in numerator and denominator.
pub fn wiou_on<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    gt: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<Var> {
    check_same_shape("weighted_iou", gt, tape.shape(logits))?;
    let p = tape.sigmoid(logits);
    let wg: Tensor<S> = Tensor::from_vec(
        gt.shape(),
        gt.data()
            .iter()
            .zip(w.data())
            .map(|(&g, &wv)| g * wv)
            .collect(),
    )?;
    let wg_sum = wg.sum();
    let wg_var = tape.constant(wg);
    let w_var = tape.constant(w.clone());
    let pwg = tape.mul(p, wg_var)?;
    let inter = tape.sum(pwg);
    let pw = tape.mul(p, w_var)?;
    let pw_sum = tape.sum(pw);
    let with_gt_mass = tape.add_const(pw_sum, wg_sum);
    let union = tape.sub(with_gt_mass, inter)?;
    let num = tape.add_const(inter, S::ONE);
    let den = tape.add_const(union, S::ONE);
    let frac = tape.div(num, den)?;
    let neg = tape.neg(frac);
    Ok(tape.add_const(neg, S::ONE))
}

/// Weighted L1 distance between sigmoid(logits) and the ground truth.
pub fn wl1_on<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    gt: &Tensor<S>,
    w: &Tensor<S>,
    normalization: Normalization,
) -> Result<Var> {
    check_same_shape("weighted_l1", gt, tape.shape(logits))?;
    let coeff = per_pixel_coeff(w, normalization);
    let p = tape.sigmoid(logits);
    let g = tape.constant(gt.clone());
    let c = tape.constant(coeff);
    let diff = tape.sub(p, g)?;
    let a = tape.abs(diff);
    let weighted = tape.mul(a, c)?;
    Ok(tape.sum(weighted))
}

/// Normalized 2D Gaussian window.
pub fn gaussian_window<S: Scalar>(size: usize, sigma: f64) -> Tensor<S> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(size * size);
    let mut total = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += v;
            data.push(v);
        }
    }
    Tensor::from_vec(
        Shape::new(1, 1, size, size),
        data.into_iter().map(|v| S::from_f64(v / total)).collect(),
    )
    .unwrap()
}

/// 1 - mean windowed SSIM between sigmoid(logits) and gt, Gaussian 11x11
/// window, unit dynamic range.
pub fn ssim_loss_on<S: Scalar>(tape: &mut Tape<S>, logits: Var, gt: &Tensor<S>) -> Result<Var> {
    let s = tape.shape(logits);
    check_same_shape("ssim_loss", gt, s)?;
    if s.c != 1 {
        return Err(Error::arg("ssim_loss", "expects single-channel maps"));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::arg(
            "ssim_loss",
            format!("spatial dims {s} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let window = tape.constant(gaussian_window::<S>(SSIM_WINDOW, SSIM_SIGMA));
    let spec = ConvSpec::unit();
    let c1 = S::from_f64(SSIM_C1);
    let c2 = S::from_f64(SSIM_C2);

    let p = tape.sigmoid(logits);
    let g = tape.constant(gt.clone());

    let mu1 = tape.conv2d(p, window, None, spec)?;
    let mu2 = tape.conv2d(g, window, None, spec)?;
    let mu1_sq = tape.mul(mu1, mu1)?;
    let mu2_sq = tape.mul(mu2, mu2)?;
    let mu1_mu2 = tape.mul(mu1, mu2)?;

    let p_sq = tape.mul(p, p)?;
    let g_sq = tape.mul(g, g)?;
    let pg = tape.mul(p, g)?;
    let e_p_sq = tape.conv2d(p_sq, window, None, spec)?;
    let e_g_sq = tape.conv2d(g_sq, window, None, spec)?;
    let e_pg = tape.conv2d(pg, window, None, spec)?;
    let sigma1 = tape.sub(e_p_sq, mu1_sq)?;
    let sigma2 = tape.sub(e_g_sq, mu2_sq)?;
    let sigma12 = tape.sub(e_pg, mu1_mu2)?;

    let cross_mu = tape.scale(mu1_mu2, S::from_f64(2.0));
    let t1 = tape.add_const(cross_mu, c1);
    let cross_sigma = tape.scale(sigma12, S::from_f64(2.0));
    let t2 = tape.add_const(cross_sigma, c2);
    let num = tape.mul(t1, t2)?;

    let mu_sum = tape.add(mu1_sq, mu2_sq)?;
    let d1 = tape.add_const(mu_sum, c1);
    let sigma_sum = tape.add(sigma1, sigma2)?;
    let d2 = tape.add_const(sigma_sum, c2);
    let den = tape.mul(d1, d2)?;

    let ssim_map = tape.div(num, den)?;
    let mean = tape.mean(ssim_map);
    let neg = tape.neg(mean);
    Ok(tape.add_const(neg, S::ONE))
}

/// Dice loss with +1 smoothing: 1 - (2 sum(pg) + 1) / (sum p + sum g + 1).
pub fn dice_loss_on<S: Scalar>(tape: &mut Tape<S>, logits: Var, gt: &Tensor<S>) -> Result<Var> {
    check_same_shape("dice_loss", gt, tape.shape(logits))?;
    let g_sum = gt.sum();
    let p = tape.sigmoid(logits);
    let g = tape.constant(gt.clone());
    let pg = tape.mul(p, g)?;
    let pg_sum = tape.sum(pg);
    let p_sum = tape.sum(p);
    let twice = tape.scale(pg_sum, S::from_f64(2.0));
    let num = tape.add_const(twice, S::ONE);
    let den = tape.add_const(p_sum, g_sum + S::ONE);
    let frac = tape.div(num, den)?;
    let neg = tape.neg(frac);
    Ok(tape.add_const(neg, S::ONE))
}

/// Plain mean BCE: uniform weights over all pixels.
pub fn bce_on<S: Scalar>(tape: &mut Tape<S>, logits: Var, gt: &Tensor<S>) -> Result<Var> {
    let w = Tensor::ones(gt.shape());
    wbce_on(tape, logits, gt, &w, Normalization::PixelCount)
}

// ---- combined objectives ----------------------------------------------------

/// Decomposition of a loss into named raw terms; `total` applies the
/// configured coefficients (unit everywhere except the contour BCE).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Tape vars for a combined loss: the total plus each raw term with its
/// coefficient in the total.
pub struct LossVars {
    pub total: Var,
    pub terms: Vec<(&'static str, f64, Var)>,
}

impl LossVars {
    /// Report view of the loss: raw term values, with the total recomputed
    /// as the coefficient-weighted sum so the decomposition is exact.
    pub fn report<S: Scalar>(&self, tape: &Tape<S>) -> LossReport {
        let terms: BTreeMap<String, f64> = self
            .terms
            .iter()
            .map(|(name, _, v)| (name.to_string(), tape.value(*v).item().to_f64()))
            .collect();
        let total = self
            .terms
            .iter()
            .map(|(name, coeff, _)| coeff * terms[*name])
            .sum();
        LossReport { total, terms }
    }
}

/// Saliency objective: wBCE + wIoU + wL1 + SSIM with the alpha weight map
/// computed once from the ground truth.
pub fn salient_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    gt: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let alpha = alpha_map(gt, cfg.alpha_window)?;
    let w = effective_weights(&alpha, cfg.weighting);
    let wbce = wbce_on(tape, logits, gt, &w, cfg.normalization)?;
    let wiou = wiou_on(tape, logits, gt, &w)?;
    let wl1 = wl1_on(tape, logits, gt, &w, cfg.normalization)?;
    let ssim = ssim_loss_on(tape, logits, gt)?;
    let s1 = tape.add(wbce, wiou)?;
    let s2 = tape.add(s1, wl1)?;
    let total = tape.add(s2, ssim)?;
    Ok(LossVars {
        total,
        terms: vec![
            ("wbce", 1.0, wbce),
            ("wiou", 1.0, wiou),
            ("wl1", 1.0, wl1),
            ("ssim", 1.0, ssim),
        ],
    })
}

/// Contour objective: 0.001 * BCE + Dice + SSIM. Terms are stored raw; the
/// coefficient only enters the total.
pub fn contour_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    contour_gt: &Tensor<S>,
) -> Result<LossVars> {
    let bce = bce_on(tape, logits, contour_gt)?;
    let dice = dice_loss_on(tape, logits, contour_gt)?;
    let ssim = ssim_loss_on(tape, logits, contour_gt)?;
    let scaled_bce = tape.scale(bce, S::from_f64(CONTOUR_BCE_COEFF));
    let s1 = tape.add(scaled_bce, dice)?;
    let total = tape.add(s1, ssim)?;
    Ok(LossVars {
        total,
        terms: vec![
            ("bce", CONTOUR_BCE_COEFF, bce),
            ("dice", 1.0, dice),
            ("ssim_contour", 1.0, ssim),
        ],
    })
}

// ---- value-level wrappers -----------------------------------------------------

fn run_scalar<S: Scalar>(
    logits: &Tensor<S>,
    f: impl FnOnce(&mut Tape<S>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), false);
    let out = f(&mut tape, z)?;
    Ok(tape.value(out).item().to_f64())
}

pub fn weighted_bce<S: Scalar>(
    logits: &Tensor<S>,
    gt: &Tensor<S>,
    alpha: &AlphaMap<S>,
) -> Result<f64> {
    let w = effective_weights(alpha, Weighting::Alpha);
    run_scalar(logits, |tape, z| {
        wbce_on(tape, z, gt, &w, Normalization::WeightSum)
    })
}

pub fn weighted_iou<S: Scalar>(
    logits: &Tensor<S>,
    gt: &Tensor<S>,
    alpha: &AlphaMap<S>,
) -> Result<f64> {
    let w = effective_weights(alpha, Weighting::Alpha);
    run_scalar(logits, |tape, z| wiou_on(tape, z, gt, &w))
}

pub fn weighted_l1<S: Scalar>(
    logits: &Tensor<S>,
    gt: &Tensor<S>,
    alpha: &AlphaMap<S>,
) -> Result<f64> {
    let w = effective_weights(alpha, Weighting::Alpha);
    run_scalar(logits, |tape, z| {
        wl1_on(tape, z, gt, &w, Normalization::WeightSum)
    })
}

pub fn ssim_loss<S: Scalar>(logits: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    run_scalar(logits, |tape, z| ssim_loss_on(tape, z, gt))
}

pub fn dice_loss<S: Scalar>(logits: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    run_scalar(logits, |tape, z| dice_loss_on(tape, z, gt))
}

pub fn salient_loss<S: Scalar>(
    logits: &Tensor<S>,
    gt: &Tensor<S>,
    window: usize,
) -> Result<LossReport> {
    let cfg = LossConfig {
        alpha_window: window,
        ..LossConfig::default()
    };
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), false);
    let vars = salient_loss_on(&mut tape, z, gt, &cfg)?;
    Ok(vars.report(&tape))
}

pub fn contour_loss<S: Scalar>(logits: &Tensor<S>, contour_gt: &Tensor<S>) -> Result<LossReport> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), false);
    let vars = contour_loss_on(&mut tape, z, contour_gt)?;
    Ok(vars.report(&tape))
}

// ---- contour ground truth -----------------------------------------------------

/// Boundary band of a mask: 3x3 morphological gradient (dilation minus
/// erosion) of the mask thresholded at 0.5, with zero padding. Yields a one
/// to two pixel contour in {0, 1}.
pub fn contour_from_mask<S: Scalar>(gt: &Tensor<S>) -> Tensor<S> {
    let s = gt.shape();
    let half = S::from_f64(0.5);
    let bin: Vec<bool> = gt.data().iter().map(|&v| v >= half).collect();
    let mut out = vec![S::ZERO; s.numel()];
    for b in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut dil = false;
                    let mut ero = true;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let iy = y as isize + dy;
                            let ix = x as isize + dx;
                            let v = if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize
                            {
                                false
                            } else {
                                bin[s.index(b, c, iy as usize, ix as usize)]
                            };
                            dil |= v;
                            ero &= v;
                        }
                    }
                    if dil && !ero {
                        out[s.index(b, c, y, x)] = S::ONE;
                    }
                }
            }
        }
    }
    Tensor::from_vec(s, out).unwrap()
}
