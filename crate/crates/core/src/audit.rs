//! Canonical finite-difference audit inventory for the gradcheck command:
//! every primitive, every composite block, every loss term, and an
//! end-to-end toy network, each with its tolerance.

use std::collections::BTreeMap;

use crate::blocks::{BufferMap, Init, NetCtx, ParamMap};
use crate::config::NetworkConfig;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::kernels::conv::ConvSpec;
use crate::loss::{self, LossConfig};
use crate::network::{self, assemble_network};
use crate::rng;
use crate::shape::Shape;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-4;
pub const TOL_PRIMITIVE: f64 = 1e-6;
pub const TOL_BLOCK: f64 = 1e-4;
pub const TOL_LOSS: f64 = 1e-4;
pub const TOL_END_TO_END: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    Losses,
    EndToEnd,
}

impl std::str::FromStr for Scope {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "blocks" => Ok(Scope::Blocks),
            "losses" => Ok(Scope::Losses),
            "end-to-end" => Ok(Scope::EndToEnd),
            other => Err(crate::error::Error::InvalidConfig(format!(
                "unknown gradcheck scope '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl AuditOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn randn(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng::normal(&mut r))
}

fn item<F>(name: &str, tolerance: f64, point: Tensor<f64>, seed: u64, f: F) -> Result<AuditOutcome>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report: GradCheckReport = finite_diff_check(f, &point, EPS, seed)?;
    Ok(AuditOutcome {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        tolerance,
        coords: report.coords_checked,
    })
}

fn primitive_audits(seed: u64) -> Result<Vec<AuditOutcome>> {
    let mut out = Vec::new();
    let s = seed * 1000;
    let kernel = randn(s + 1, Shape::new(3, 2, 3, 3));
    out.push(item(
        "conv2d/input",
        TOL_PRIMITIVE,
        randn(s + 2, Shape::new(1, 2, 6, 6)),
        seed,
        |tape, x| {
            let w = tape.constant(kernel.clone());
            let y = tape.conv2d(x, w, None, ConvSpec::same_3x3(2))?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    let x_fixed = randn(s + 3, Shape::new(1, 2, 6, 6));
    out.push(item(
        "conv2d/kernel",
        TOL_PRIMITIVE,
        randn(s + 4, Shape::new(3, 2, 3, 3)),
        seed,
        |tape, w| {
            let x = tape.constant(x_fixed.clone());
            let b = tape.leaf(randn(s + 5, Shape::new(1, 1, 1, 3)), true);
            let y = tape.conv2d(x, w, Some(b), ConvSpec::same_3x3(1))?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "max_pool2d",
        TOL_PRIMITIVE,
        randn(s + 6, Shape::new(1, 2, 6, 6)),
        seed,
        |tape, x| {
            let y = tape.max_pool2d(x, 2, 2, 0)?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "avg_pool2d",
        TOL_PRIMITIVE,
        randn(s + 7, Shape::new(1, 2, 6, 6)),
        seed,
        |tape, x| {
            let y = tape.avg_pool2d(x, 2, 2, 0)?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "bilinear_upsample",
        TOL_PRIMITIVE,
        randn(s + 8, Shape::new(1, 2, 4, 4)),
        seed,
        |tape, x| {
            let y = tape.bilinear_upsample(x, 2)?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "batch_norm/train",
        TOL_PRIMITIVE,
        randn(s + 9, Shape::new(2, 4, 4, 4)),
        seed,
        |tape, x| {
            let sc = tape.constant(Tensor::full(Shape::new(1, 1, 1, 4), 1.2));
            let sh = tape.constant(Tensor::full(Shape::new(1, 1, 1, 4), -0.1));
            let mut rm = vec![0.0; 4];
            let mut rv = vec![1.0; 4];
            let y = tape.batch_norm(x, sc, sh, &mut rm, &mut rv, 0.1, 1e-5, true)?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "batch_norm/eval",
        TOL_PRIMITIVE,
        randn(s + 10, Shape::new(2, 3, 4, 4)),
        seed,
        |tape, x| {
            let sc = tape.constant(Tensor::full(Shape::new(1, 1, 1, 3), 0.9));
            let sh = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 3)));
            let mut rm = vec![0.2, -0.4, 0.1];
            let mut rv = vec![1.1, 0.8, 1.4];
            let y = tape.batch_norm(x, sc, sh, &mut rm, &mut rv, 0.1, 1e-5, false)?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "group_norm",
        TOL_PRIMITIVE,
        randn(s + 11, Shape::new(1, 8, 4, 4)),
        seed,
        |tape, x| {
            let sc = tape.constant(Tensor::full(Shape::new(1, 1, 1, 8), 1.1));
            let sh = tape.constant(Tensor::full(Shape::new(1, 1, 1, 8), 0.05));
            let y = tape.group_norm(x, sc, sh, 4, 1e-5)?;
            let sg = tape.sigmoid(y);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "relu",
        TOL_PRIMITIVE,
        randn(s + 12, Shape::new(1, 2, 4, 4)),
        seed,
        |tape, x| {
            let y = tape.relu(x);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        },
    )?);
    out.push(item(
        "sigmoid",
        TOL_PRIMITIVE,
        randn(s + 13, Shape::new(1, 2, 4, 4)),
        seed,
        |tape, x| {
            let y = tape.sigmoid(x);
            Ok(tape.sum(y))
        },
    )?);
    out.push(item(
        "concat_slice",
        TOL_PRIMITIVE,
        randn(s + 14, Shape::new(1, 4, 4, 4)),
        seed,
        |tape, x| {
            let a = tape.slice_channels(x, 0, 2)?;
            let b = tape.slice_channels(x, 2, 2)?;
            let cat = tape.concat(&[b, a])?;
            let sg = tape.sigmoid(cat);
            Ok(tape.sum(sg))
        },
    )?);
    let kq = randn(s + 15, Shape::new(1, 1, 5, 4));
    let vq = randn(s + 16, Shape::new(1, 1, 5, 4));
    out.push(item(
        "attention/q",
        TOL_PRIMITIVE,
        randn(s + 17, Shape::new(1, 1, 3, 4)),
        seed,
        |tape, q| {
            let k = tape.constant(kq.clone());
            let v = tape.constant(vq.clone());
            let o = tape.attention(q, k, v)?;
            let sg = tape.sigmoid(o);
            Ok(tape.sum(sg))
        },
    )?);
    let qq = randn(s + 18, Shape::new(1, 1, 3, 4));
    out.push(item(
        "attention/kv",
        TOL_PRIMITIVE,
        randn(s + 19, Shape::new(1, 1, 5, 4)),
        seed,
        |tape, k| {
            let q = tape.constant(qq.clone());
            let v = tape.mul(k, k)?;
            let o = tape.attention(q, k, v)?;
            let sg = tape.sigmoid(o);
            Ok(tape.sum(sg))
        },
    )?);
    out.push(item(
        "token_reshapes",
        TOL_PRIMITIVE,
        randn(s + 20, Shape::new(1, 4, 3, 3)),
        seed,
        |tape, x| {
            let t = tape.flatten_tokens(x)?;
            let sp = tape.split_heads(t, 2)?;
            let mg = tape.merge_heads(sp)?;
            let back = tape.unflatten_tokens(mg, 3, 3)?;
            let sg = tape.sigmoid(back);
            Ok(tape.sum(sg))
        },
    )?);
    let other = randn(s + 21, Shape::new(1, 1, 4, 4)).map(|v| v + 3.0);
    out.push(item(
        "elementwise_chain",
        TOL_PRIMITIVE,
        randn(s + 22, Shape::new(1, 1, 4, 4)),
        seed,
        |tape, x| {
            let o = tape.constant(other.clone());
            let prod = tape.mul(x, o)?;
            let q = tape.div(prod, o)?;
            let d = tape.sub(q, o)?;
            let a = tape.abs(d);
            let sc = tape.scale(a, 0.3);
            let sh = tape.add_const(sc, 0.7);
            Ok(tape.mean(sh))
        },
    )?);
    Ok(out)
}

fn block_audits(seed: u64) -> Result<Vec<AuditOutcome>> {
    let s = seed * 2000;
    let config = NetworkConfig::toy(4, 32);
    let mut out = Vec::new();

    struct BlockCase {
        name: &'static str,
        point: Shape,
    }
    let cases = [
        BlockCase {
            name: "conv_b",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "double_conv",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "down_block",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "up_block",
            point: Shape::new(1, 4, 4, 4),
        },
        BlockCase {
            name: "mrffam",
            point: Shape::new(1, 8, 16, 16),
        },
        BlockCase {
            name: "lpm",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "msa",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "cfm",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "hybrid_block",
            point: Shape::new(1, 4, 8, 8),
        },
        BlockCase {
            name: "decoder_block",
            point: Shape::new(1, 4, 8, 8),
        },
    ];

    for (i, case) in cases.iter().enumerate() {
        let mut params: ParamMap<f64> = BTreeMap::new();
        let mut buffers: BufferMap<f64> = BTreeMap::new();
        let mut r = rng::seeded(s + i as u64);
        let mut init = Init::new(&mut params, &mut buffers, &mut r);
        let skip = randn(s + 100 + i as u64, Shape::new(1, 8, 8, 8));
        let aux_b = randn(s + 200 + i as u64, Shape::new(1, 4, 8, 8));
        let aux_c = randn(s + 300 + i as u64, Shape::new(1, 4, 8, 8));
        match case.name {
            "conv_b" => init.conv_b("blk", 4, 4),
            "double_conv" => init.double_conv("blk", 4, 4),
            "down_block" => init.double_conv("blk", 4, 8),
            "up_block" => init.double_conv("blk", 12, 4),
            "mrffam" => init.mrffam("blk", 8, 8, &[2, 4]),
            "lpm" => init.lpm("blk", 4),
            "msa" => init.msa("blk", 4, 2),
            "cfm" => init.cfm("blk", &[4, 4, 4], 4),
            "hybrid_block" => {
                network::init_hybrid_block(&mut init, &config, "blk", "HB1", 4, 8, 3)?
            }
            "decoder_block" => network::init_decoder_block(&mut init, &config, "blk", "CB2", 4)?,
            _ => unreachable!(),
        }
        let point = randn(s + 400 + i as u64, case.point);
        let config2 = config.clone();
        let name = case.name;
        let outcome = item(name, TOL_BLOCK, point, seed, move |tape, x| {
            let mut bufs = buffers.clone();
            let mut ctx = NetCtx::new(tape, &params, &mut bufs, 4, 1, true, false);
            let y = match name {
                "conv_b" => ctx.conv_b("blk", x, 6)?,
                "double_conv" => ctx.double_conv("blk", x)?,
                "down_block" => ctx.down_block("blk", x)?,
                "up_block" => {
                    let sk = ctx.tape.constant(skip.clone());
                    ctx.up_block("blk", x, sk)?
                }
                "mrffam" => ctx.mrffam("blk", x, &[2, 4])?,
                "lpm" => ctx.lpm("blk", x)?,
                "msa" => ctx.msa("blk", x, 4)?,
                "cfm" => {
                    let b = ctx.tape.constant(aux_b.clone());
                    let c = ctx.tape.constant(aux_c.clone());
                    ctx.cfm("blk", &[x, b, c])?
                }
                "hybrid_block" => network::hybrid_block(&mut ctx, &config2, "blk", "HB1", x, 2)?,
                "decoder_block" => network::decoder_block(&mut ctx, &config2, "blk", "CB2", x)?,
                _ => unreachable!(),
            };
            let sg = ctx.tape.sigmoid(y);
            Ok(ctx.tape.sum(sg))
        })?;
        out.push(outcome);
    }
    Ok(out)
}

fn loss_audits(seed: u64) -> Result<Vec<AuditOutcome>> {
    let s = seed * 3000;
    let shape = Shape::new(1, 1, 16, 16);
    let gt = randn(s + 1, shape).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let alpha = loss::alpha_map(&gt, 7)?;
    let w = loss::effective_weights(&alpha, loss::Weighting::Alpha);
    let contour = loss::contour_from_mask(&gt);
    let cfg = LossConfig {
        alpha_window: 7,
        ..LossConfig::default()
    };
    let point = randn(s + 2, shape);

    let mut out = Vec::new();
    {
        let (gt, w) = (gt.clone(), w.clone());
        out.push(item(
            "loss/wbce",
            TOL_LOSS,
            point.clone(),
            seed,
            move |tape, z| loss::wbce_on(tape, z, &gt, &w, loss::Normalization::WeightSum),
        )?);
    }
    {
        let (gt, w) = (gt.clone(), w.clone());
        out.push(item(
            "loss/wiou",
            TOL_LOSS,
            point.clone(),
            seed,
            move |tape, z| loss::wiou_on(tape, z, &gt, &w),
        )?);
    }
    {
        let (gt, w) = (gt.clone(), w.clone());
        out.push(item(
            "loss/wl1",
            TOL_LOSS,
            point.clone(),
            seed,
            move |tape, z| loss::wl1_on(tape, z, &gt, &w, loss::Normalization::WeightSum),
        )?);
    }
    {
        let gt = gt.clone();
        out.push(item(
            "loss/ssim",
            TOL_LOSS,
            point.clone(),
            seed,
            move |tape, z| loss::ssim_loss_on(tape, z, &gt),
        )?);
    }
    {
        let gt = gt.clone();
        out.push(item(
            "loss/dice",
            TOL_LOSS,
            point.clone(),
            seed,
            move |tape, z| loss::dice_loss_on(tape, z, &gt),
        )?);
    }
    {
        let gt = gt.clone();
        out.push(item(
            "loss/salient_total",
            TOL_LOSS,
            point.clone(),
            seed,
            move |tape, z| Ok(loss::salient_loss_on(tape, z, &gt, &cfg)?.total),
        )?);
    }
    {
        let contour = contour.clone();
        out.push(item(
            "loss/contour_total",
            TOL_LOSS,
            point,
            seed,
            move |tape, z| Ok(loss::contour_loss_on(tape, z, &contour)?.total),
        )?);
    }
    Ok(out)
}

/// End-to-end audit: a width-8 network at 96x96 in double precision,
/// differentiated through the full training objective with respect to the
/// input batch and representative parameter tensors.
fn end_to_end_audits(seed: u64) -> Result<Vec<AuditOutcome>> {
    let config = NetworkConfig::toy(8, 96);
    let state = assemble_network::<f64>(&config, seed)?;
    let mut r = rng::seeded(seed * 4000 + 1);
    let batch = Tensor::from_fn(Shape::new(1, 3, 96, 96), |_, _, _, _| {
        0.5 * rng::normal(&mut r)
    });
    let mask = Tensor::from_fn(Shape::new(1, 1, 96, 96), |_, _, y, x| {
        let dy = y as f64 - 48.0;
        let dx = x as f64 - 48.0;
        if dy * dy + dx * dx < 24.0 * 24.0 {
            1.0
        } else {
            0.0
        }
    });
    let contour = loss::contour_from_mask(&mask);
    let loss_cfg = LossConfig::default();

    let objective = {
        let state = state.clone();
        let (mask, contour) = (mask.clone(), contour.clone());
        move |tape: &mut Tape<f64>, input: Var, bound: Option<(&str, Var)>| -> Result<Var> {
            let mut st = state.clone();
            let bindings: Vec<(&str, Var)> = bound.into_iter().collect();
            let out = st.forward_with_bindings(tape, input, true, false, &bindings)?;
            let sal_loss = loss::salient_loss_on(tape, out.saliency, &mask, &loss_cfg)?;
            let con = out.contour.expect("contour head enabled");
            let con_loss = loss::contour_loss_on(tape, con, &contour)?;
            tape.add(sal_loss.total, con_loss.total)
        }
    };

    let mut out = Vec::new();
    {
        let objective = &objective;
        out.push(item(
            "end_to_end/input",
            TOL_END_TO_END,
            batch.clone(),
            seed,
            move |tape, x| objective(tape, x, None),
        )?);
    }
    // Early-layer kernels sit above so many ReLU/pooling sites that central
    // differences average over dense kinks and stop measuring the point
    // derivative; their backward is certified by the primitive and block
    // audits instead. The end-to-end items differentiate through the whole
    // depth (input) and at representative mid/late parameters.
    for path in [
        "hb1.msa.step0.q.weight",
        "up3.1.conv.weight",
        "head_sal.weight",
    ] {
        let point = state.params[path].clone();
        let batch = batch.clone();
        let objective = &objective;
        out.push(item(
            &format!("end_to_end/{path}"),
            TOL_END_TO_END,
            point,
            seed,
            move |tape, var| {
                let input = tape.constant(batch.clone());
                objective(tape, input, Some((path, var)))
            },
        )?);
    }
    Ok(out)
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<AuditOutcome>> {
    match scope {
        Scope::Primitives => primitive_audits(seed),
        Scope::Blocks => block_audits(seed),
        Scope::Losses => loss_audits(seed),
        Scope::EndToEnd => end_to_end_audits(seed),
    }
}

pub fn all_scopes() -> [Scope; 4] {
    [
        Scope::Primitives,
        Scope::Blocks,
        Scope::Losses,
        Scope::EndToEnd,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_scope_passes_tight_tolerance() {
        for outcome in run_scope(Scope::Primitives, 1).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn loss_scope_passes() {
        for outcome in run_scope(Scope::Losses, 1).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }
}
