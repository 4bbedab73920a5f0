//! Brute-force loop oracles for the acceptance suite, independent of the
//! production kernels they check: plain nested loops over the definitions.

use rand::Rng;
use sodawidenet::kernels::conv::{self, ConvSpec};
use sodawidenet::loss;
use sodawidenet::metrics::{self, EMeasureMode};
use sodawidenet::rng;
use sodawidenet::shape::Shape;
use sodawidenet::tape::Tape;
use sodawidenet::tensor::Tensor;

const TOL: f64 = 1e-9;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn close(got: f64, want: f64, what: &str, trial: usize) -> Result<(), String> {
    if (got - want).abs() < TOL {
        Ok(())
    } else {
        Err(format!("{what} trial {trial}: {got} vs {want}"))
    }
}

fn randn(r: &mut rand_chacha::ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng::normal(r))
}

fn random_mask(r: &mut rand_chacha::ChaCha8Rng, shape: Shape, density: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        if r.random::<f64>() < density {
            1.0
        } else {
            0.0
        }
    })
}

fn conv_instances(trials: usize) -> Result<(), String> {
    let mut r = rng::seeded(9001);
    for trial in 0..trials {
        let ic = 1 + r.random_range(0..3);
        let oc = 1 + r.random_range(0..3);
        let k = if r.random::<f64>() < 0.5 { 1 } else { 3 };
        let dilation = 1 + r.random_range(0..2);
        let padding = r.random_range(0..=dilation);
        let h = 5 + r.random_range(0..4);
        let w = 5 + r.random_range(0..4);
        let xs = Shape::new(1, ic, h, w);
        let ws = Shape::new(oc, ic, k, k);
        let spec = ConvSpec {
            stride: 1,
            padding,
            dilation,
            groups: 1,
        };
        if conv::conv_output_shape(xs, ws, &spec).is_err() {
            continue;
        }
        let x = randn(&mut r, xs);
        let wt = randn(&mut r, ws);
        let (got, os) =
            conv::forward(x.data(), xs, wt.data(), ws, None, &spec).map_err(|e| e.to_string())?;

        for b in 0..os.n {
            for o in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = 0.0;
                        for i in 0..ic {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy + ky * dilation) as isize - padding as isize;
                                    let ix = (ox + kx * dilation) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc +=
                                        x.at(0, i, iy as usize, ix as usize) * wt.at(o, i, ky, kx);
                                }
                            }
                        }
                        close(got[os.index(b, o, oy, ox)], acc, "conv2d", trial)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn attention_instances(trials: usize) -> Result<(), String> {
    let mut r = rng::seeded(9002);
    for trial in 0..trials {
        let nq = 1 + r.random_range(0..6);
        let nk = 1 + r.random_range(0..8);
        let d = 1 + r.random_range(0..8);
        let qs = Shape::new(1, 1, nq, d);
        let ks = Shape::new(1, 1, nk, d);
        let q = randn(&mut r, qs);
        let k = randn(&mut r, ks);
        let v = randn(&mut r, ks);
        let mut tape = Tape::<f64>::new();
        let qv = tape.leaf(q.clone(), false);
        let kv = tape.leaf(k.clone(), false);
        let vv = tape.leaf(v.clone(), false);
        let out = tape.attention(qv, kv, vv).map_err(|e| e.to_string())?;
        let got = tape.value(out).clone();

        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q.at(0, 0, i, t) * k.at(0, 0, j, t);
                }
                *s = dot / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for t in 0..d {
                let mut acc = 0.0;
                for (j, e) in exps.iter().enumerate() {
                    acc += e / denom * v.at(0, 0, j, t);
                }
                close(got.at(0, 0, i, t), acc, "attention", trial)?;
            }
        }
    }
    Ok(())
}

fn loss_instances(trials: usize) -> Result<(), String> {
    let mut r = rng::seeded(9003);
    let shape = Shape::new(1, 1, 8, 8);
    for trial in 0..trials {
        let gt = random_mask(&mut r, shape, 0.2 + 0.6 * (trial % 4) as f64 / 3.0);
        let logits = randn(&mut r, shape).map(|v| 2.0 * v);
        let alpha = loss::alpha_map(&gt, 5).map_err(|e| e.to_string())?;
        let w = loss::effective_weights(&alpha, loss::Weighting::Alpha);

        let wsum: f64 = w.sum();
        let mut bce_acc = 0.0;
        let mut inter = 0.0;
        let mut union_mass = 0.0;
        let mut l1_acc = 0.0;
        let mut pg = 0.0;
        let mut psum = 0.0;
        let gsum: f64 = gt.sum();
        for i in 0..shape.numel() {
            let z = logits.data()[i];
            let g = gt.data()[i];
            let wv = w.data()[i];
            let p = sigmoid(z);
            bce_acc += wv * (z.max(0.0) - z * g + (-z.abs()).exp().ln_1p());
            inter += wv * p * g;
            union_mass += wv * (p + g);
            l1_acc += wv * (p - g).abs();
            pg += p * g;
            psum += p;
        }
        let want_bce = bce_acc / wsum;
        let want_iou = 1.0 - (inter + 1.0) / (union_mass - inter + 1.0);
        let want_l1 = l1_acc / wsum;
        let want_dice = 1.0 - (2.0 * pg + 1.0) / (psum + gsum + 1.0);

        close(
            loss::weighted_bce(&logits, &gt, &alpha).map_err(|e| e.to_string())?,
            want_bce,
            "weighted_bce",
            trial,
        )?;
        close(
            loss::weighted_iou(&logits, &gt, &alpha).map_err(|e| e.to_string())?,
            want_iou,
            "weighted_iou",
            trial,
        )?;
        close(
            loss::weighted_l1(&logits, &gt, &alpha).map_err(|e| e.to_string())?,
            want_l1,
            "weighted_l1",
            trial,
        )?;
        close(
            loss::dice_loss(&logits, &gt).map_err(|e| e.to_string())?,
            want_dice,
            "dice",
            trial,
        )?;
    }
    Ok(())
}

fn metric_instances(trials: usize) -> Result<(), String> {
    let mut r = rng::seeded(9004);
    let shape = Shape::new(1, 1, 8, 8);
    for trial in 0..trials {
        let pred = Tensor::<f64>::from_fn(shape, |_, _, _, _| r.random::<f64>());
        let gt = random_mask(&mut r, shape, 0.1 + 0.2 * (trial % 5) as f64);
        let gt_bin: Vec<bool> = gt.data().iter().map(|&g| g >= 0.5).collect();
        let positives = gt_bin.iter().filter(|&&b| b).count();

        // MAE.
        let want_mae = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| (p - g).abs())
            .sum::<f64>()
            / shape.numel() as f64;
        close(
            metrics::mae(&pred, &gt).map_err(|e| e.to_string())?,
            want_mae,
            "mae",
            trial,
        )?;

        // PR curve and max F.
        let (p_curve, r_curve) = metrics::pr_curve(&pred, &gt).map_err(|e| e.to_string())?;
        let mut want_f: f64 = 0.0;
        for kk in 0..256 {
            let t = kk as f64 / 255.0;
            let mut tp = 0;
            let mut fp = 0;
            for (i, &pv) in pred.data().iter().enumerate() {
                if pv >= t {
                    if gt_bin[i] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let prec = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rec = if positives == 0 {
                1.0
            } else {
                tp as f64 / positives as f64
            };
            close(p_curve[kk], prec, "precision", trial)?;
            close(r_curve[kk], rec, "recall", trial)?;
            let denom = 0.3 * prec + rec;
            if denom > 0.0 {
                want_f = want_f.max(1.3 * prec * rec / denom);
            }
        }
        close(
            metrics::max_f_measure(&p_curve, &r_curve, 0.3),
            want_f,
            "f_max",
            trial,
        )?;

        // E-measure, max over the threshold sweep.
        let n = shape.numel() as f64;
        let mut want_e: f64 = 0.0;
        for kk in 0..256 {
            let t = kk as f64 / 255.0;
            let pred_bin: Vec<bool> = pred.data().iter().map(|&p| p >= t).collect();
            let pred_mean = pred_bin.iter().filter(|&&b| b).count() as f64 / n;
            let e = if positives == 0 {
                1.0 - pred_mean
            } else if positives == shape.numel() {
                pred_mean
            } else {
                let gt_mean = positives as f64 / n;
                let mut acc = 0.0;
                for i in 0..shape.numel() {
                    let phi_p = (pred_bin[i] as u8 as f64) - pred_mean;
                    let phi_g = (gt_bin[i] as u8 as f64) - gt_mean;
                    let denom = phi_g * phi_g + phi_p * phi_p;
                    let xi = if denom == 0.0 {
                        0.0
                    } else {
                        2.0 * phi_g * phi_p / denom
                    };
                    acc += (1.0 + xi) * (1.0 + xi) / 4.0;
                }
                acc / n
            };
            want_e = want_e.max(e);
        }
        close(
            metrics::e_measure(&pred, &gt, EMeasureMode::Max).map_err(|e| e.to_string())?,
            want_e,
            "e_measure",
            trial,
        )?;
    }
    Ok(())
}

/// Run every oracle family with at least `trials` randomized instances.
pub fn run_all(trials: usize) -> Result<(), String> {
    conv_instances(trials)?;
    attention_instances(trials)?;
    loss_instances(trials)?;
    metric_instances(trials)?;
    Ok(())
}
