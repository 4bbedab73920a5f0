//! Batch and group normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Statistics saved during the forward pass for the backward pass.
/// One (mean, inv_std) pair per statistic group: per channel for batch norm,
/// per (sample, group) for group norm.
#[derive(Debug, Clone)]
pub struct NormCtx<S: Scalar> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

fn check_affine_len<S: Scalar>(scale: &[S], shift: &[S], channels: usize) -> Result<()> {
    if scale.len() != channels || shift.len() != channels {
        return Err(Error::arg(
            "normalize",
            format!(
                "scale/shift lengths {}/{} must equal channels {}",
                scale.len(),
                shift.len(),
                channels
            ),
        ));
    }
    Ok(())
}

/// Batch norm in training mode: statistics over (N, H, W) per channel.
/// Running statistics are updated in place with the given momentum; the
/// running variance uses the unbiased estimator when more than one element
/// contributed.
#[allow(clippy::too_many_arguments)]
pub fn batch_forward_train<S: Scalar>(
    x: &[S],
    xs: Shape,
    scale: &[S],
    shift: &[S],
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: f64,
    eps: f64,
) -> Result<(Vec<S>, NormCtx<S>)> {
    check_affine_len(scale, shift, xs.c)?;
    let m = (xs.n * xs.h * xs.w) as f64;
    let mut out = vec![S::ZERO; xs.numel()];
    let mut ctx = NormCtx {
        mean: vec![S::ZERO; xs.c],
        inv_std: vec![S::ZERO; xs.c],
    };
    let plane = xs.h * xs.w;
    for c in 0..xs.c {
        let mut sum = S::ZERO;
        let mut sq = S::ZERO;
        for b in 0..xs.n {
            let base = xs.index(b, c, 0, 0);
            for &v in &x[base..base + plane] {
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / S::from_f64(m);
        let var = (sq / S::from_f64(m) - mean * mean).maximum(S::ZERO);
        let inv_std = S::ONE / (var + S::from_f64(eps)).sqrt();
        ctx.mean[c] = mean;
        ctx.inv_std[c] = inv_std;

        let unbiased = if m > 1.0 {
            var * S::from_f64(m / (m - 1.0))
        } else {
            var
        };
        let mom = S::from_f64(momentum);
        running_mean[c] = (S::ONE - mom) * running_mean[c] + mom * mean;
        running_var[c] = (S::ONE - mom) * running_var[c] + mom * unbiased;

        let (sc, sh) = (scale[c], shift[c]);
        for b in 0..xs.n {
            let base = xs.index(b, c, 0, 0);
            for (o, &v) in out[base..base + plane]
                .iter_mut()
                .zip(&x[base..base + plane])
            {
                *o = (v - mean) * inv_std * sc + sh;
            }
        }
    }
    Ok((out, ctx))
}

/// Batch norm in eval mode: a per-channel affine map using running stats.
pub fn batch_forward_eval<S: Scalar>(
    x: &[S],
    xs: Shape,
    scale: &[S],
    shift: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
) -> Result<(Vec<S>, NormCtx<S>)> {
    check_affine_len(scale, shift, xs.c)?;
    let mut out = vec![S::ZERO; xs.numel()];
    let mut ctx = NormCtx {
        mean: running_mean.to_vec(),
        inv_std: vec![S::ZERO; xs.c],
    };
    let plane = xs.h * xs.w;
    for c in 0..xs.c {
        let inv_std = S::ONE / (running_var[c] + S::from_f64(eps)).sqrt();
        ctx.inv_std[c] = inv_std;
        let (mean, sc, sh) = (running_mean[c], scale[c], shift[c]);
        for b in 0..xs.n {
            let base = xs.index(b, c, 0, 0);
            for (o, &v) in out[base..base + plane]
                .iter_mut()
                .zip(&x[base..base + plane])
            {
                *o = (v - mean) * inv_std * sc + sh;
            }
        }
    }
    Ok((out, ctx))
}

/// Backward for training-mode batch norm (statistics depend on the input).
pub fn batch_backward_train<S: Scalar>(
    grad: &[S],
    x: &[S],
    xs: Shape,
    scale: &[S],
    ctx: &NormCtx<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let m = S::from_usize(xs.n * xs.h * xs.w);
    let plane = xs.h * xs.w;
    let mut dx = vec![S::ZERO; xs.numel()];
    let mut dscale = vec![S::ZERO; xs.c];
    let mut dshift = vec![S::ZERO; xs.c];
    for c in 0..xs.c {
        let (mean, inv_std, sc) = (ctx.mean[c], ctx.inv_std[c], scale[c]);
        let mut sum_g = S::ZERO;
        let mut sum_gx = S::ZERO;
        for b in 0..xs.n {
            let base = xs.index(b, c, 0, 0);
            for (&g, &v) in grad[base..base + plane].iter().zip(&x[base..base + plane]) {
                let xhat = (v - mean) * inv_std;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        dscale[c] = sum_gx;
        dshift[c] = sum_g;
        for b in 0..xs.n {
            let base = xs.index(b, c, 0, 0);
            for i in base..base + plane {
                let xhat = (x[i] - mean) * inv_std;
                dx[i] = sc * inv_std * (grad[i] - sum_g / m - xhat * sum_gx / m);
            }
        }
    }
    (dx, dscale, dshift)
}

/// Backward for eval-mode batch norm (statistics are constants).
pub fn batch_backward_eval<S: Scalar>(
    grad: &[S],
    x: &[S],
    xs: Shape,
    scale: &[S],
    ctx: &NormCtx<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let plane = xs.h * xs.w;
    let mut dx = vec![S::ZERO; xs.numel()];
    let mut dscale = vec![S::ZERO; xs.c];
    let mut dshift = vec![S::ZERO; xs.c];
    for c in 0..xs.c {
        let (mean, inv_std, sc) = (ctx.mean[c], ctx.inv_std[c], scale[c]);
        for b in 0..xs.n {
            let base = xs.index(b, c, 0, 0);
            for i in base..base + plane {
                let xhat = (x[i] - mean) * inv_std;
                dscale[c] += grad[i] * xhat;
                dshift[c] += grad[i];
                dx[i] = grad[i] * sc * inv_std;
            }
        }
    }
    (dx, dscale, dshift)
}

/// Group norm: statistics per (sample, channel group), independent of batch
/// size. Group count must divide the channel count.
pub fn group_forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    scale: &[S],
    shift: &[S],
    groups: usize,
    eps: f64,
) -> Result<(Vec<S>, NormCtx<S>)> {
    check_affine_len(scale, shift, xs.c)?;
    if groups == 0 || !xs.c.is_multiple_of(groups) {
        return Err(Error::arg(
            "group_norm",
            format!("channels {} not divisible by groups {groups}", xs.c),
        ));
    }
    let cg = xs.c / groups;
    let m = (cg * xs.h * xs.w) as f64;
    let plane = xs.h * xs.w;
    let mut out = vec![S::ZERO; xs.numel()];
    let mut ctx = NormCtx {
        mean: vec![S::ZERO; xs.n * groups],
        inv_std: vec![S::ZERO; xs.n * groups],
    };
    for b in 0..xs.n {
        for g in 0..groups {
            let mut sum = S::ZERO;
            let mut sq = S::ZERO;
            for cl in 0..cg {
                let base = xs.index(b, g * cg + cl, 0, 0);
                for &v in &x[base..base + plane] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / S::from_f64(m);
            let var = (sq / S::from_f64(m) - mean * mean).maximum(S::ZERO);
            let inv_std = S::ONE / (var + S::from_f64(eps)).sqrt();
            ctx.mean[b * groups + g] = mean;
            ctx.inv_std[b * groups + g] = inv_std;
            for cl in 0..cg {
                let c = g * cg + cl;
                let (sc, sh) = (scale[c], shift[c]);
                let base = xs.index(b, c, 0, 0);
                for (o, &v) in out[base..base + plane]
                    .iter_mut()
                    .zip(&x[base..base + plane])
                {
                    *o = (v - mean) * inv_std * sc + sh;
                }
            }
        }
    }
    Ok((out, ctx))
}

pub fn group_backward<S: Scalar>(
    grad: &[S],
    x: &[S],
    xs: Shape,
    scale: &[S],
    groups: usize,
    ctx: &NormCtx<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let cg = xs.c / groups;
    let m = S::from_usize(cg * xs.h * xs.w);
    let plane = xs.h * xs.w;
    let mut dx = vec![S::ZERO; xs.numel()];
    let mut dscale = vec![S::ZERO; xs.c];
    let mut dshift = vec![S::ZERO; xs.c];
    for b in 0..xs.n {
        for g in 0..groups {
            let mean = ctx.mean[b * groups + g];
            let inv_std = ctx.inv_std[b * groups + g];
            let mut sum_dxhat = S::ZERO;
            let mut sum_dxhat_xhat = S::ZERO;
            for cl in 0..cg {
                let c = g * cg + cl;
                let base = xs.index(b, c, 0, 0);
                for i in base..base + plane {
                    let xhat = (x[i] - mean) * inv_std;
                    let dxhat = grad[i] * scale[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dscale[c] += grad[i] * xhat;
                    dshift[c] += grad[i];
                }
            }
            for cl in 0..cg {
                let c = g * cg + cl;
                let base = xs.index(b, c, 0, 0);
                for i in base..base + plane {
                    let xhat = (x[i] - mean) * inv_std;
                    let dxhat = grad[i] * scale[c];
                    dx[i] = inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                }
            }
        }
    }
    (dx, dscale, dshift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn group_norm_standardizes_known_distribution() {
        // Mean 5, variance 4 input; single group, identity affine.
        let xs = Shape::new(1, 4, 4, 4);
        let mut rng = rng::seeded(11);
        let x: Vec<f64> = (0..xs.numel())
            .map(|_| 5.0 + 2.0 * rng::normal(&mut rng))
            .collect();
        let (out, _) = group_forward(&x, xs, &[1.0; 4], &[0.0; 4], 1, 1e-5).unwrap();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn group_norm_is_batch_size_independent() {
        let one = Shape::new(1, 4, 3, 3);
        let mut rng = rng::seeded(5);
        let samples: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..one.numel()).map(|_| rng::normal(&mut rng)).collect())
            .collect();
        let scale = vec![1.5f64, 0.5, 1.0, 2.0];
        let shift = vec![0.1f64, -0.2, 0.0, 0.3];

        let stacked: Vec<f64> = samples.concat();
        let four = Shape::new(4, 4, 3, 3);
        let (batch_out, _) = group_forward(&stacked, four, &scale, &shift, 2, 1e-5).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let (solo, _) = group_forward(s, one, &scale, &shift, 2, 1e-5).unwrap();
            let row = &batch_out[i * one.numel()..(i + 1) * one.numel()];
            for (a, b) in row.iter().zip(&solo) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_centers_each_channel() {
        let xs = Shape::new(4, 8, 4, 4);
        let mut rng = rng::seeded(2);
        let x: Vec<f64> = (0..xs.numel())
            .map(|_| 3.0 * rng::normal(&mut rng) + 1.0)
            .collect();
        let mut rm = vec![0.0f64; 8];
        let mut rv = vec![1.0f64; 8];
        let (out, _) =
            batch_forward_train(&x, xs, &[1.0; 8], &[0.0; 8], &mut rm, &mut rv, 0.1, 1e-5).unwrap();
        let plane = 16;
        for c in 0..8 {
            let mut mean = 0.0;
            for b in 0..4 {
                let base = xs.index(b, c, 0, 0);
                mean += out[base..base + plane].iter().sum::<f64>();
            }
            mean /= (4 * plane) as f64;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        }
        // Running stats moved toward the batch stats.
        assert!(rm.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let xs = Shape::new(1, 6, 2, 2);
        let x = vec![0.0f32; xs.numel()];
        assert!(group_forward(&x, xs, &[1.0; 6], &[0.0; 6], 4, 1e-5).is_err());
    }
}
