//! 2D convolution with stride, zero padding, dilation and channel groups.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Hyperparameters of a convolution. Square kernels only; the kernel extent
/// along one axis is (k-1)*dilation + 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit() -> ConvSpec {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    /// "Same" padding for a 3x3 kernel at dilation d is d.
    pub fn same_3x3(dilation: usize) -> ConvSpec {
        ConvSpec {
            stride: 1,
            padding: dilation,
            dilation,
            groups: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.dilation < 1 || self.groups < 1 {
            return Err(Error::arg(
                "conv2d",
                format!(
                    "stride/dilation/groups must be >= 1, got {}/{}/{}",
                    self.stride, self.dilation, self.groups
                ),
            ));
        }
        Ok(())
    }
}

/// Output spatial extent along one axis, or an error when the dilated kernel
/// does not fit in the padded input.
pub fn conv_out_extent(input: usize, kernel: usize, spec: &ConvSpec) -> Result<usize> {
    let effective = (kernel - 1) * spec.dilation + 1;
    let padded = input + 2 * spec.padding;
    if effective > padded {
        return Err(Error::arg(
            "conv2d",
            format!("effective kernel {effective} exceeds padded input {padded}"),
        ));
    }
    Ok((padded - effective) / spec.stride + 1)
}

/// Checks input/kernel compatibility and returns the output shape.
/// Kernel shape is (out_channels, in_channels/groups, kh, kw).
pub fn conv_output_shape(input: Shape, kernel: Shape, spec: &ConvSpec) -> Result<Shape> {
    spec.validate()?;
    let (oc, ic_per_g) = (kernel.n, kernel.c);
    if !input.c.is_multiple_of(spec.groups) || oc % spec.groups != 0 {
        return Err(Error::arg(
            "conv2d",
            format!(
                "channels {} / out channels {} not divisible by groups {}",
                input.c, oc, spec.groups
            ),
        ));
    }
    if ic_per_g != input.c / spec.groups {
        return Err(Error::shape("conv2d", input, kernel));
    }
    let oh = conv_out_extent(input.h, kernel.h, spec)?;
    let ow = conv_out_extent(input.w, kernel.w, spec)?;
    Ok(Shape::new(input.n, oc, oh, ow))
}

/// Row-wise direct convolution. The stride-1 inner loop walks contiguous
/// slices so it vectorizes; other strides fall back to scalar indexing.
pub fn forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    w: &[S],
    ws: Shape,
    bias: Option<&[S]>,
    spec: &ConvSpec,
) -> Result<(Vec<S>, Shape)> {
    let os = conv_output_shape(xs, ws, spec)?;
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::arg(
                "conv2d",
                format!("bias length {} != out channels {}", b.len(), ws.n),
            ));
        }
    }
    let mut out = vec![S::ZERO; os.numel()];
    let ic_per_g = ws.c;
    let oc_per_g = ws.n / spec.groups;
    let (kh, kw) = (ws.h, ws.w);
    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;

    for b in 0..xs.n {
        for g in 0..spec.groups {
            for ocg in 0..oc_per_g {
                let oc = g * oc_per_g + ocg;
                if let Some(bias) = bias {
                    let base = os.index(b, oc, 0, 0);
                    for v in &mut out[base..base + os.h * os.w] {
                        *v = bias[oc];
                    }
                }
                for icg in 0..ic_per_g {
                    let ic = g * ic_per_g + icg;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w[ws.index(oc, icg, ky, kx)];
                            if wv == S::ZERO {
                                continue;
                            }
                            accumulate_row(
                                &mut out,
                                os,
                                x,
                                xs,
                                b,
                                oc,
                                ic,
                                ky,
                                kx,
                                wv,
                                pad,
                                dil,
                                spec.stride,
                            );
                        }
                    }
                }
            }
        }
    }
    Ok((out, os))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_row<S: Scalar>(
    out: &mut [S],
    os: Shape,
    x: &[S],
    xs: Shape,
    b: usize,
    oc: usize,
    ic: usize,
    ky: usize,
    kx: usize,
    wv: S,
    pad: isize,
    dil: isize,
    stride: usize,
) {
    let dx = kx as isize * dil - pad;
    for oy in 0..os.h {
        let iy = oy as isize * stride as isize - pad + ky as isize * dil;
        if iy < 0 || iy >= xs.h as isize {
            continue;
        }
        let in_row = xs.index(b, ic, iy as usize, 0);
        let out_row = os.index(b, oc, oy, 0);
        if stride == 1 {
            // ow + dx must land in [0, W)
            let lo = (-dx).max(0) as usize;
            let hi = ((xs.w as isize - dx).min(os.w as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src =
                &x[in_row + (lo as isize + dx) as usize..in_row + (hi as isize + dx) as usize];
            let dst = &mut out[out_row + lo..out_row + hi];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += wv * s;
            }
        } else {
            for ox in 0..os.w {
                let ix = ox as isize * stride as isize + dx;
                if ix < 0 || ix >= xs.w as isize {
                    continue;
                }
                out[out_row + ox] += wv * x[in_row + ix as usize];
            }
        }
    }
}

/// Gradient with respect to the input: scatter of grad by the kernel taps.
pub fn backward_input<S: Scalar>(
    grad: &[S],
    os: Shape,
    xs: Shape,
    w: &[S],
    ws: Shape,
    spec: &ConvSpec,
) -> Vec<S> {
    let mut dx = vec![S::ZERO; xs.numel()];
    let ic_per_g = ws.c;
    let oc_per_g = ws.n / spec.groups;
    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;

    for b in 0..xs.n {
        for g in 0..spec.groups {
            for ocg in 0..oc_per_g {
                let oc = g * oc_per_g + ocg;
                for icg in 0..ic_per_g {
                    let ic = g * ic_per_g + icg;
                    for ky in 0..ws.h {
                        for kx in 0..ws.w {
                            let wv = w[ws.index(oc, icg, ky, kx)];
                            if wv == S::ZERO {
                                continue;
                            }
                            scatter_row(
                                &mut dx,
                                xs,
                                grad,
                                os,
                                b,
                                oc,
                                ic,
                                ky,
                                kx,
                                wv,
                                pad,
                                dil,
                                spec.stride,
                            );
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_row<S: Scalar>(
    dx: &mut [S],
    xs: Shape,
    grad: &[S],
    os: Shape,
    b: usize,
    oc: usize,
    ic: usize,
    ky: usize,
    kx: usize,
    wv: S,
    pad: isize,
    dil: isize,
    stride: usize,
) {
    let dxoff = kx as isize * dil - pad;
    for oy in 0..os.h {
        let iy = oy as isize * stride as isize - pad + ky as isize * dil;
        if iy < 0 || iy >= xs.h as isize {
            continue;
        }
        let in_row = xs.index(b, ic, iy as usize, 0);
        let out_row = os.index(b, oc, oy, 0);
        if stride == 1 {
            let lo = (-dxoff).max(0) as usize;
            let hi = ((xs.w as isize - dxoff).min(os.w as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src = &grad[out_row + lo..out_row + hi];
            let dst = &mut dx
                [in_row + (lo as isize + dxoff) as usize..in_row + (hi as isize + dxoff) as usize];
            for (d, &gv) in dst.iter_mut().zip(src) {
                *d += wv * gv;
            }
        } else {
            for ox in 0..os.w {
                let ix = ox as isize * stride as isize + dxoff;
                if ix < 0 || ix >= xs.w as isize {
                    continue;
                }
                dx[in_row + ix as usize] += wv * grad[out_row + ox];
            }
        }
    }
}

/// Gradient with respect to the kernel.
pub fn backward_kernel<S: Scalar>(
    grad: &[S],
    os: Shape,
    x: &[S],
    xs: Shape,
    ws: Shape,
    spec: &ConvSpec,
) -> Vec<S> {
    let mut dw = vec![S::ZERO; ws.numel()];
    let ic_per_g = ws.c;
    let oc_per_g = ws.n / spec.groups;
    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;

    for b in 0..xs.n {
        for g in 0..spec.groups {
            for ocg in 0..oc_per_g {
                let oc = g * oc_per_g + ocg;
                for icg in 0..ic_per_g {
                    let ic = g * ic_per_g + icg;
                    for ky in 0..ws.h {
                        for kx in 0..ws.w {
                            let dxoff = kx as isize * dil - pad;
                            let mut acc = S::ZERO;
                            for oy in 0..os.h {
                                let iy =
                                    oy as isize * spec.stride as isize - pad + ky as isize * dil;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                let in_row = xs.index(b, ic, iy as usize, 0);
                                let out_row = os.index(b, oc, oy, 0);
                                if spec.stride == 1 {
                                    let lo = (-dxoff).max(0) as usize;
                                    let hi = ((xs.w as isize - dxoff).min(os.w as isize)).max(0)
                                        as usize;
                                    if lo >= hi {
                                        continue;
                                    }
                                    let gs = &grad[out_row + lo..out_row + hi];
                                    let xsl = &x[in_row + (lo as isize + dxoff) as usize
                                        ..in_row + (hi as isize + dxoff) as usize];
                                    for (&gv, &xv) in gs.iter().zip(xsl) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for ox in 0..os.w {
                                        let ix = ox as isize * spec.stride as isize + dxoff;
                                        if ix < 0 || ix >= xs.w as isize {
                                            continue;
                                        }
                                        acc += grad[out_row + ox] * x[in_row + ix as usize];
                                    }
                                }
                            }
                            dw[ws.index(oc, icg, ky, kx)] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Gradient with respect to the bias: sum of grad over batch and space.
pub fn backward_bias<S: Scalar>(grad: &[S], os: Shape) -> Vec<S> {
    let mut db = vec![S::ZERO; os.c];
    for b in 0..os.n {
        for (c, dbc) in db.iter_mut().enumerate() {
            let base = os.index(b, c, 0, 0);
            let mut acc = S::ZERO;
            for &g in &grad[base..base + os.h * os.w] {
                acc += g;
            }
            *dbc += acc;
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_overlap_of_ones_sums_kernel_taps() {
        // 3x3 all-ones input and kernel with same padding: center tap sees
        // the whole kernel footprint.
        let xs = Shape::new(1, 1, 3, 3);
        let ws = Shape::new(1, 1, 3, 3);
        let spec = ConvSpec {
            stride: 1,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let (out, os) = forward::<f64>(&[1.0; 9], xs, &[1.0; 9], ws, None, &spec).unwrap();
        assert_eq!(os, xs);
        assert_eq!(out[os.index(0, 0, 1, 1)], 9.0);
        assert_eq!(out[os.index(0, 0, 0, 0)], 4.0);
    }

    #[test]
    fn dilated_same_padding_preserves_shape() {
        let xs = Shape::new(1, 1, 13, 13);
        let ws = Shape::new(1, 1, 3, 3);
        let spec = ConvSpec::same_3x3(6);
        let os = conv_output_shape(xs, ws, &spec).unwrap();
        assert_eq!(os, Shape::new(1, 1, 13, 13));
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let xs = Shape::new(1, 1, 2, 2);
        let ws = Shape::new(1, 1, 3, 3);
        let err = conv_output_shape(xs, ws, &ConvSpec::unit());
        assert!(err.is_err());
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let xs = Shape::new(1, 3, 8, 8);
        let ws = Shape::new(4, 2, 3, 3);
        let err = conv_output_shape(xs, ws, &ConvSpec::unit()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x3x8x8") && msg.contains("4x2x3x3"), "{msg}");
    }

    #[test]
    fn strided_output_shape_formula() {
        let xs = Shape::new(2, 3, 11, 9);
        let ws = Shape::new(5, 3, 3, 3);
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let os = conv_output_shape(xs, ws, &spec).unwrap();
        // floor((11 + 2 - 2 - 1)/2) + 1 = 6, floor((9 + 2 - 2 - 1)/2) + 1 = 5
        assert_eq!(os, Shape::new(2, 5, 6, 5));
    }
}
