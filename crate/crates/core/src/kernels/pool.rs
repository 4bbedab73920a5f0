//! Max and average pooling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn pool_output_shape(input: Shape, spec: &PoolSpec) -> Result<Shape> {
    if spec.kernel < 1 || spec.stride < 1 {
        return Err(Error::arg("pool2d", "kernel and stride must be >= 1"));
    }
    // Keeps every window intersecting the input, so max pooling always has
    // a real element to select.
    if spec.padding > spec.kernel / 2 {
        return Err(Error::arg(
            "pool2d",
            format!(
                "padding {} exceeds half the kernel {}",
                spec.padding, spec.kernel
            ),
        ));
    }
    let padded_h = input.h + 2 * spec.padding;
    let padded_w = input.w + 2 * spec.padding;
    if spec.kernel > padded_h || spec.kernel > padded_w {
        return Err(Error::arg(
            "pool2d",
            format!(
                "kernel {} exceeds padded input {}x{}",
                spec.kernel, padded_h, padded_w
            ),
        ));
    }
    Ok(Shape::new(
        input.n,
        input.c,
        (padded_h - spec.kernel) / spec.stride + 1,
        (padded_w - spec.kernel) / spec.stride + 1,
    ))
}

/// Max pool. Returns the pooled values and, per output element, the flat
/// input index of the maximum (ties resolve to the first in scan order).
/// Padded positions never win: the window is intersected with the input.
pub fn max_forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    spec: &PoolSpec,
) -> Result<(Vec<S>, Shape, Vec<usize>)> {
    let os = pool_output_shape(xs, spec)?;
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::with_capacity(os.numel());
    let pad = spec.padding as isize;
    for b in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let y0 = oy as isize * spec.stride as isize - pad;
                    let x0 = ox as isize * spec.stride as isize - pad;
                    let mut best = S::from_f64(f64::NEG_INFINITY);
                    let mut best_idx = usize::MAX;
                    for ky in 0..spec.kernel {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let idx = xs.index(b, c, iy as usize, ix as usize);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    debug_assert!(best_idx != usize::MAX, "pool window fell outside input");
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((out, os, argmax))
}

pub fn max_backward<S: Scalar>(grad: &[S], xs: Shape, argmax: &[usize]) -> Vec<S> {
    let mut dx = vec![S::ZERO; xs.numel()];
    for (&g, &idx) in grad.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

/// Average pool; the divisor is always kernel*kernel (padding counts).
pub fn avg_forward<S: Scalar>(x: &[S], xs: Shape, spec: &PoolSpec) -> Result<(Vec<S>, Shape)> {
    let os = pool_output_shape(xs, spec)?;
    let inv = S::ONE / S::from_usize(spec.kernel * spec.kernel);
    let mut out = Vec::with_capacity(os.numel());
    let pad = spec.padding as isize;
    for b in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let y0 = oy as isize * spec.stride as isize - pad;
                    let x0 = ox as isize * spec.stride as isize - pad;
                    let mut acc = S::ZERO;
                    for ky in 0..spec.kernel {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            acc += x[xs.index(b, c, iy as usize, ix as usize)];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    Ok((out, os))
}

pub fn avg_backward<S: Scalar>(grad: &[S], os: Shape, xs: Shape, spec: &PoolSpec) -> Vec<S> {
    let mut dx = vec![S::ZERO; xs.numel()];
    let inv = S::ONE / S::from_usize(spec.kernel * spec.kernel);
    let pad = spec.padding as isize;
    for b in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = grad[os.index(b, c, oy, ox)] * inv;
                    let y0 = oy as isize * spec.stride as isize - pad;
                    let x0 = ox as isize * spec.stride as isize - pad;
                    for ky in 0..spec.kernel {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            dx[xs.index(b, c, iy as usize, ix as usize)] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Windowed maximum at stride 1 with zero padding, used for loss weight maps.
/// Zero padding is an explicit floor: a window that sees only padding yields 0.
pub fn windowed_max<S: Scalar>(x: &[S], xs: Shape, window: usize) -> Result<Vec<S>> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::arg(
            "windowed_max",
            format!("window must be odd and >= 1, got {window}"),
        ));
    }
    let half = (window - 1) / 2;
    let mut out = Vec::with_capacity(xs.numel());
    for b in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for xw in 0..xs.w {
                    let mut best = S::ZERO;
                    let y_lo = y.saturating_sub(half);
                    let y_hi = (y + half).min(xs.h - 1);
                    let x_lo = xw.saturating_sub(half);
                    let x_hi = (xw + half).min(xs.w - 1);
                    for iy in y_lo..=y_hi {
                        for ix in x_lo..=x_hi {
                            best = best.maximum(x[xs.index(b, c, iy, ix)]);
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_4x4() -> (Vec<f64>, Shape) {
        ((1..=16).map(|v| v as f64).collect(), Shape::new(1, 1, 4, 4))
    }

    #[test]
    fn max_pool_2x2_takes_block_maxima() {
        let (x, xs) = ramp_4x4();
        let spec = PoolSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (out, os, _) = max_forward(&x, xs, &spec).unwrap();
        assert_eq!(os, Shape::new(1, 1, 2, 2));
        assert_eq!(out, vec![6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn avg_pool_2x2_takes_block_means() {
        let (x, xs) = ramp_4x4();
        let spec = PoolSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (out, _) = avg_forward(&x, xs, &spec).unwrap();
        assert_eq!(out, vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn repeated_halving_reaches_one_pixel() {
        let mut xs = Shape::new(1, 3, 16, 16);
        let mut x = vec![1.0f32; xs.numel()];
        let spec = PoolSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        for _ in 0..4 {
            let (nx, ns) = avg_forward(&x, xs, &spec).unwrap();
            x = nx;
            xs = ns;
        }
        assert_eq!(xs, Shape::new(1, 3, 1, 1));
    }

    #[test]
    fn oversized_kernel_errors() {
        let (x, xs) = ramp_4x4();
        let spec = PoolSpec {
            kernel: 5,
            stride: 1,
            padding: 0,
        };
        assert!(max_forward(&x, xs, &spec).is_err());
    }

    #[test]
    fn windowed_max_rejects_even_window() {
        let (x, xs) = ramp_4x4();
        assert!(windowed_max(&x, xs, 4).is_err());
    }
}
