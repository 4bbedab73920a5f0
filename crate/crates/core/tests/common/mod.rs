//! Brute-force oracles shared by the integration tests.
//!
//! Everything here is written as plainly as possible — nested loops over
//! definitions — and never calls into the production kernels it checks.

#![allow(dead_code)]

use sodawidenet::shape::Shape;

/// Direct nested-sum convolution over (b, oc, oh, ow, ic, kh, kw).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> (Vec<f64>, Shape) {
    let oh = (xs.h + 2 * padding - dilation * (ws.h - 1) - 1) / stride + 1;
    let ow = (xs.w + 2 * padding - dilation * (ws.w - 1) - 1) / stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let ic_per_g = xs.c / groups;
    let oc_per_g = ws.n / groups;
    let mut out = vec![0.0; os.numel()];
    for b in 0..xs.n {
        for oc in 0..ws.n {
            let g = oc / oc_per_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|bv| bv[oc]).unwrap_or(0.0);
                    for icg in 0..ic_per_g {
                        let ic = g * ic_per_g + icg;
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x[xs.index(b, ic, iy as usize, ix as usize)]
                                    * w[ws.index(oc, icg, ky, kx)];
                            }
                        }
                    }
                    out[os.index(b, oc, oy, ox)] = acc;
                }
            }
        }
    }
    (out, os)
}

/// Two-loop softmax-weighted sum: out[i] = sum_j softmax_j(q_i.k_j/sqrt(d)) v_j.
pub fn attention_oracle(
    q: &[f64],
    qs: Shape,
    k: &[f64],
    ks: Shape,
    v: &[f64],
) -> (Vec<f64>, Shape) {
    let (nq, nk, d) = (qs.h, ks.h, qs.w);
    let os = Shape::new(qs.n, qs.c, nq, d);
    let mut out = vec![0.0; os.numel()];
    for b in 0..qs.n {
        for h in 0..qs.c {
            for i in 0..nq {
                let mut scores = vec![0.0; nk];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += q[qs.index(b, h, i, t)] * k[ks.index(b, h, j, t)];
                    }
                    *s = dot / (d as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for t in 0..d {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / denom * v[ks.index(b, h, j, t)];
                    }
                    out[os.index(b, h, i, t)] = acc;
                }
            }
        }
    }
    (out, os)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel loop over the stable BCE definition, weighted and normalized.
pub fn weighted_bce_oracle(logits: &[f64], gt: &[f64], w: &[f64]) -> f64 {
    let wsum: f64 = w.iter().sum();
    let mut acc = 0.0;
    for i in 0..logits.len() {
        let z = logits[i];
        let l = z.max(0.0) - z * gt[i] + (-z.abs()).exp().ln_1p();
        acc += w[i] * l;
    }
    acc / wsum
}

pub fn weighted_iou_oracle(logits: &[f64], gt: &[f64], w: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for i in 0..logits.len() {
        let p = sigmoid(logits[i]);
        inter += w[i] * p * gt[i];
        union += w[i] * (p + gt[i]);
    }
    let union = union - inter;
    1.0 - (inter + 1.0) / (union + 1.0)
}

pub fn weighted_l1_oracle(logits: &[f64], gt: &[f64], w: &[f64]) -> f64 {
    let wsum: f64 = w.iter().sum();
    let mut acc = 0.0;
    for i in 0..logits.len() {
        acc += w[i] * (sigmoid(logits[i]) - gt[i]).abs();
    }
    acc / wsum
}

pub fn dice_oracle(logits: &[f64], gt: &[f64]) -> f64 {
    let mut pg = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for i in 0..logits.len() {
        let p = sigmoid(logits[i]);
        pg += p * gt[i];
        psum += p;
        gsum += gt[i];
    }
    1.0 - (2.0 * pg + 1.0) / (psum + gsum + 1.0)
}

/// Windowed max with zero padding, evaluated pointwise.
pub fn alpha_oracle(gt: &[f64], xs: Shape, window: usize) -> Vec<f64> {
    let half = (window as isize - 1) / 2;
    let mut out = vec![0.0; xs.numel()];
    for b in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for x in 0..xs.w {
                    let mut best: f64 = 0.0;
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let iy = y as isize + dy;
                            let ix = x as isize + dx;
                            if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                continue;
                            }
                            best = best.max(gt[xs.index(b, c, iy as usize, ix as usize)]);
                        }
                    }
                    out[xs.index(b, c, y, x)] = best;
                }
            }
        }
    }
    out
}

pub fn mae_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        acc += (pred[i] - gt[i]).abs();
    }
    acc / pred.len() as f64
}

/// Precision/recall at the 256 thresholds k/255, counting pixel by pixel.
pub fn pr_oracle(pred: &[f64], gt_bin: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut precision = Vec::with_capacity(256);
    let mut recall = Vec::with_capacity(256);
    let positives = gt_bin.iter().filter(|&&g| g).count();
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        for i in 0..pred.len() {
            if pred[i] >= t {
                if gt_bin[i] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        precision.push(if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
        recall.push(if positives == 0 {
            1.0
        } else {
            tp as f64 / positives as f64
        });
    }
    (precision, recall)
}

pub fn f_measure_oracle(p: &[f64], r: &[f64], beta_sq: f64) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..p.len() {
        let denom = beta_sq * p[i] + r[i];
        let f = if denom == 0.0 {
            0.0
        } else {
            (1.0 + beta_sq) * p[i] * r[i] / denom
        };
        best = best.max(f);
    }
    best
}

/// Enhanced-alignment measure at one binarization threshold.
pub fn e_measure_at_oracle(pred_bin: &[bool], gt_bin: &[bool]) -> f64 {
    let n = pred_bin.len() as f64;
    let gt_ones = gt_bin.iter().filter(|&&g| g).count();
    let pred_mean = pred_bin.iter().filter(|&&p| p).count() as f64 / n;
    if gt_ones == 0 {
        return 1.0 - pred_mean;
    }
    if gt_ones == pred_bin.len() {
        return pred_mean;
    }
    let gt_mean = gt_ones as f64 / n;
    let mut acc = 0.0;
    for i in 0..pred_bin.len() {
        let phi_p = (pred_bin[i] as u8 as f64) - pred_mean;
        let phi_g = (gt_bin[i] as u8 as f64) - gt_mean;
        let xi = 2.0 * phi_g * phi_p / (phi_g * phi_g + phi_p * phi_p + 1e-20);
        acc += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    acc / n
}

pub fn e_measure_max_oracle(pred: &[f64], gt_bin: &[bool]) -> f64 {
    let mut best: f64 = 0.0;
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let pred_bin: Vec<bool> = pred.iter().map(|&p| p >= t).collect();
        best = best.max(e_measure_at_oracle(&pred_bin, gt_bin));
    }
    best
}

/// 3x3 morphological gradient on a binary mask, zero padded.
pub fn contour_oracle(mask: &[f64], xs: Shape) -> Vec<f64> {
    let mut out = vec![0.0; xs.numel()];
    for b in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for x in 0..xs.w {
                    let mut dil = 0.0f64;
                    let mut ero = 1.0f64;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let iy = y as isize + dy;
                            let ix = x as isize + dx;
                            let v =
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    0.0
                                } else {
                                    mask[xs.index(b, c, iy as usize, ix as usize)]
                                };
                            dil = dil.max(v);
                            ero = ero.min(v);
                        }
                    }
                    out[xs.index(b, c, y, x)] = (dil - ero).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}
