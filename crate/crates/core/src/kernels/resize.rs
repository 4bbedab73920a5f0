//! Bilinear interpolation with half-pixel-center sampling (align-corners off).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

/// Per-axis interpolation table: for each destination index the two source
/// indices and the weight of the second one.
fn axis_table(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = (d as f64 + 0.5) * scale - 0.5;
            let pos = pos.clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn resize_output_shape(input: Shape, out_h: usize, out_w: usize) -> Result<Shape> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("bilinear", "target dims must be >= 1"));
    }
    Ok(Shape::new(input.n, input.c, out_h, out_w))
}

/// Resize to an arbitrary target size. Upsampling by an integer factor and
/// the data loader's resize share this one implementation.
pub fn bilinear_forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    out_h: usize,
    out_w: usize,
) -> Result<(Vec<S>, Shape)> {
    let os = resize_output_shape(xs, out_h, out_w)?;
    let ytab = axis_table(out_h, xs.h);
    let xtab = axis_table(out_w, xs.w);
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..xs.n {
        for c in 0..xs.c {
            for &(y0, y1, fy) in &ytab {
                let row0 = xs.index(b, c, y0, 0);
                let row1 = xs.index(b, c, y1, 0);
                for &(x0, x1, fx) in &xtab {
                    let top = x[row0 + x0].to_f64() * (1.0 - fx) + x[row0 + x1].to_f64() * fx;
                    let bot = x[row1 + x0].to_f64() * (1.0 - fx) + x[row1 + x1].to_f64() * fx;
                    out.push(S::from_f64(top * (1.0 - fy) + bot * fy));
                }
            }
        }
    }
    Ok((out, os))
}

/// Adjoint of the interpolation: each output gradient is scattered onto its
/// four source corners with the forward weights.
pub fn bilinear_backward<S: Scalar>(grad: &[S], os: Shape, xs: Shape) -> Vec<S> {
    let ytab = axis_table(os.h, xs.h);
    let xtab = axis_table(os.w, xs.w);
    let mut dx = vec![S::ZERO; xs.numel()];
    for b in 0..os.n {
        for c in 0..os.c {
            for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                let row0 = xs.index(b, c, y0, 0);
                let row1 = xs.index(b, c, y1, 0);
                let grow = os.index(b, c, oy, 0);
                for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                    let g = grad[grow + ox].to_f64();
                    dx[row0 + x0] += S::from_f64(g * (1.0 - fy) * (1.0 - fx));
                    dx[row0 + x1] += S::from_f64(g * (1.0 - fy) * fx);
                    dx[row1 + x0] += S::from_f64(g * fy * (1.0 - fx));
                    dx[row1 + x1] += S::from_f64(g * fy * fx);
                }
            }
        }
    }
    dx
}
