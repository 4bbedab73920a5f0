//! Scaled dot-product attention over token tensors.
//!
//! Token tensors are rank-4: (batch, heads, tokens, dim). Single-head usage
//! keeps the head axis at 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

pub fn attention_output_shape(q: Shape, k: Shape, v: Shape) -> Result<Shape> {
    if q.n != k.n || q.n != v.n || q.c != k.c || q.c != v.c {
        return Err(Error::shape("attention", q, k));
    }
    if q.w != k.w {
        return Err(Error::arg(
            "attention",
            format!("query dim {} != key dim {}", q.w, k.w),
        ));
    }
    if k.h != v.h || k.w != v.w {
        return Err(Error::shape("attention", k, v));
    }
    Ok(Shape::new(q.n, q.c, q.h, v.w))
}

/// softmax(Q Kᵀ / sqrt(d)) V per (batch, head). Rows are stabilized by
/// subtracting the row maximum before exponentiation. Returns the output and
/// the softmax matrix (batch*heads*nq*nk) for the backward pass.
pub fn forward<S: Scalar>(
    q: &[S],
    qs: Shape,
    k: &[S],
    ks: Shape,
    v: &[S],
    vs: Shape,
) -> Result<(Vec<S>, Shape, Vec<S>)> {
    let os = attention_output_shape(qs, ks, vs)?;
    let (nq, nk, d) = (qs.h, ks.h, qs.w);
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![S::ZERO; os.numel()];
    let mut weights = vec![S::ZERO; qs.n * qs.c * nq * nk];

    for b in 0..qs.n {
        for h in 0..qs.c {
            let qbase = qs.index(b, h, 0, 0);
            let kbase = ks.index(b, h, 0, 0);
            let vbase = vs.index(b, h, 0, 0);
            let obase = os.index(b, h, 0, 0);
            let wbase = ((b * qs.c) + h) * nq * nk;
            for i in 0..nq {
                let qrow = &q[qbase + i * d..qbase + (i + 1) * d];
                let wrow = &mut weights[wbase + i * nk..wbase + (i + 1) * nk];
                let mut row_max = S::from_f64(f64::NEG_INFINITY);
                for (j, w) in wrow.iter_mut().enumerate() {
                    let krow = &k[kbase + j * d..kbase + (j + 1) * d];
                    let mut dot = S::ZERO;
                    for (&a, &bv) in qrow.iter().zip(krow) {
                        dot += a * bv;
                    }
                    *w = dot * inv_sqrt_d;
                    row_max = row_max.maximum(*w);
                }
                let mut denom = S::ZERO;
                for w in wrow.iter_mut() {
                    *w = (*w - row_max).exp();
                    denom += *w;
                }
                for w in wrow.iter_mut() {
                    *w /= denom;
                }
                let orow = &mut out[obase + i * vs.w..obase + (i + 1) * vs.w];
                for (j, &w) in wrow.iter().enumerate() {
                    let vrow = &v[vbase + j * vs.w..vbase + (j + 1) * vs.w];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
    Ok((out, os, weights))
}

/// Gradients through the fused attention. `weights` is the softmax matrix
/// saved by the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn backward<S: Scalar>(
    grad: &[S],
    os: Shape,
    q: &[S],
    qs: Shape,
    k: &[S],
    ks: Shape,
    v: &[S],
    vs: Shape,
    weights: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (nq, nk, d) = (qs.h, ks.h, qs.w);
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());
    let mut dq = vec![S::ZERO; qs.numel()];
    let mut dk = vec![S::ZERO; ks.numel()];
    let mut dv = vec![S::ZERO; vs.numel()];

    for b in 0..qs.n {
        for h in 0..qs.c {
            let qbase = qs.index(b, h, 0, 0);
            let kbase = ks.index(b, h, 0, 0);
            let vbase = vs.index(b, h, 0, 0);
            let obase = os.index(b, h, 0, 0);
            let wbase = ((b * qs.c) + h) * nq * nk;
            for i in 0..nq {
                let grow = &grad[obase + i * vs.w..obase + (i + 1) * vs.w];
                let wrow = &weights[wbase + i * nk..wbase + (i + 1) * nk];

                // dA[j] = <dOut_i, V_j>, then softmax backward within the row.
                let mut da = vec![S::ZERO; nk];
                for (j, daj) in da.iter_mut().enumerate() {
                    let vrow = &v[vbase + j * vs.w..vbase + (j + 1) * vs.w];
                    let mut dot = S::ZERO;
                    for (&g, &vv) in grow.iter().zip(vrow) {
                        dot += g * vv;
                    }
                    *daj = dot;
                }
                let mut dot_aw = S::ZERO;
                for (&daj, &w) in da.iter().zip(wrow) {
                    dot_aw += daj * w;
                }
                for j in 0..nk {
                    let ds = wrow[j] * (da[j] - dot_aw) * inv_sqrt_d;
                    let qrow = &q[qbase + i * d..qbase + (i + 1) * d];
                    let krow = &k[kbase + j * d..kbase + (j + 1) * d];
                    let dqrow = &mut dq[qbase + i * d..qbase + (i + 1) * d];
                    for ((dqv, &kv), _) in dqrow.iter_mut().zip(krow).zip(0..d) {
                        *dqv += ds * kv;
                    }
                    let dkrow = &mut dk[kbase + j * d..kbase + (j + 1) * d];
                    for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                        *dkv += ds * qv;
                    }
                    let dvrow = &mut dv[vbase + j * vs.w..vbase + (j + 1) * vs.w];
                    for (dvv, &g) in dvrow.iter_mut().zip(grow) {
                        *dvv += wrow[j] * g;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_key_returns_the_value_row() {
        let qs = Shape::new(1, 1, 3, 4);
        let ks = Shape::new(1, 1, 1, 4);
        let vs = Shape::new(1, 1, 1, 4);
        let mut r = rng::seeded(1);
        let q: Vec<f64> = (0..qs.numel()).map(|_| rng::normal(&mut r)).collect();
        let k: Vec<f64> = (0..ks.numel()).map(|_| rng::normal(&mut r)).collect();
        let v: Vec<f64> = vec![0.3, -1.2, 4.0, 0.5];
        let (out, os, _) = forward(&q, qs, &k, ks, &v, vs).unwrap();
        assert_eq!(os, Shape::new(1, 1, 3, 4));
        for i in 0..3 {
            for j in 0..4 {
                assert!((out[i * 4 + j] - v[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_the_values() {
        let qs = Shape::new(1, 1, 1, 2);
        let ks = Shape::new(1, 1, 3, 2);
        let vs = Shape::new(1, 1, 3, 2);
        let q = vec![0.7f64, -0.3];
        let k = vec![1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0];
        let v = vec![0.0f64, 3.0, 6.0, -3.0, 3.0, 0.0];
        let (out, _, weights) = forward(&q, qs, &k, ks, &v, vs).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-12);
        assert!((out[1] - 0.0).abs() < 1e-12);
        let wsum: f64 = weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_dim_mismatch_is_an_error() {
        let qs = Shape::new(1, 1, 2, 4);
        let ks = Shape::new(1, 1, 2, 8);
        let q = vec![0.0f32; qs.numel()];
        let k = vec![0.0f32; ks.numel()];
        assert!(forward(&q, qs, &k, ks, &k, ks).is_err());
    }
}
