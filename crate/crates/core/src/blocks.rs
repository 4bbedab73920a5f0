//! Network building blocks: ConvB/Double_Conv/Down/Up primitives, the
//! multi-receptive-field aggregation module, the local processing module,
//! pyramid attention, and cross-feature fusion.
//!
//! Parameters live in a path-keyed map owned by the caller; a `NetCtx`
//! binds them onto a tape lazily so the same block code serves training,
//! inference, and double-precision gradient audits.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const GN_EPS: f64 = 1e-5;

pub type ParamMap<S> = BTreeMap<String, Tensor<S>>;
pub type BufferMap<S> = BTreeMap<String, Tensor<S>>;

// ---- initialization ------------------------------------------------------

/// Writes freshly initialized parameters into a path-keyed map.
pub struct Init<'a, S: Scalar> {
    pub params: &'a mut ParamMap<S>,
    pub buffers: &'a mut BufferMap<S>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, S: Scalar> Init<'a, S> {
    pub fn new(
        params: &'a mut ParamMap<S>,
        buffers: &'a mut BufferMap<S>,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Init {
            params,
            buffers,
            rng,
        }
    }

    fn insert(&mut self, path: String, t: Tensor<S>) {
        let prev = self.params.insert(path.clone(), t);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    /// Kaiming-initialized conv kernel, zero bias when requested.
    pub fn conv(&mut self, prefix: &str, oc: usize, ic_per_g: usize, k: usize, bias: bool) {
        let kernel = rng::kaiming_conv(self.rng, Shape::new(oc, ic_per_g, k, k));
        self.insert(format!("{prefix}.weight"), kernel);
        if bias {
            self.insert(
                format!("{prefix}.bias"),
                Tensor::zeros(Shape::new(1, 1, 1, oc)),
            );
        }
    }

    fn affine(&mut self, prefix: &str, channels: usize) {
        self.insert(
            format!("{prefix}.scale"),
            Tensor::ones(Shape::new(1, 1, 1, channels)),
        );
        self.insert(
            format!("{prefix}.shift"),
            Tensor::zeros(Shape::new(1, 1, 1, channels)),
        );
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) {
        self.affine(prefix, channels);
        self.buffers.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros(Shape::new(1, 1, 1, channels)),
        );
        self.buffers.insert(
            format!("{prefix}.running_var"),
            Tensor::ones(Shape::new(1, 1, 1, channels)),
        );
    }

    pub fn group_norm(&mut self, prefix: &str, channels: usize) {
        self.affine(prefix, channels);
    }

    pub fn conv_b(&mut self, prefix: &str, ic: usize, oc: usize) {
        self.conv(&format!("{prefix}.conv"), oc, ic, 3, false);
        self.batch_norm(&format!("{prefix}.bn"), oc);
    }

    pub fn double_conv(&mut self, prefix: &str, ic: usize, oc: usize) {
        self.conv_b(&format!("{prefix}.0"), ic, oc);
        self.conv_b(&format!("{prefix}.1"), oc, oc);
    }

    pub fn conv_gn(&mut self, prefix: &str, ic: usize, oc: usize) {
        self.conv(&format!("{prefix}.conv"), oc, ic, 3, false);
        self.group_norm(&format!("{prefix}.gn"), oc);
    }

    /// Channel-split dilated branches: 1x1 projection up to a multiple of
    /// the branch count, two serial dilated ConvB per branch, concat, 1x1
    /// fusion back to `oc`.
    pub fn mrffam(&mut self, prefix: &str, ic: usize, oc: usize, rates: &[usize]) {
        let width = mrffam_width(ic, rates.len());
        let per = width / rates.len();
        self.conv(&format!("{prefix}.proj"), width, ic, 1, true);
        for (g, _) in rates.iter().enumerate() {
            self.conv_b(&format!("{prefix}.branch{g}.0"), per, per);
            self.conv_b(&format!("{prefix}.branch{g}.1"), per, per);
        }
        self.conv(&format!("{prefix}.fuse"), oc, width, 1, true);
    }

    pub fn lpm(&mut self, prefix: &str, channels: usize) {
        self.conv_b(&format!("{prefix}.local"), channels, channels);
        self.conv_b(&format!("{prefix}.down1"), channels, channels);
        self.conv_b(&format!("{prefix}.down2"), channels, channels);
        self.conv(&format!("{prefix}.fuse"), channels, 2 * channels, 1, true);
    }

    /// Pyramid attention over `levels` resolutions. Each refinement level
    /// gets a Double_Conv; each attention step its own Q/K/V projections.
    pub fn msa(&mut self, prefix: &str, channels: usize, levels: usize) {
        for k in 1..levels {
            self.double_conv(&format!("{prefix}.pyr{k}"), channels, channels);
        }
        let steps = attention_step_count(levels);
        for s in 0..steps {
            self.conv(&format!("{prefix}.step{s}.q"), channels, channels, 1, true);
            self.conv(&format!("{prefix}.step{s}.k"), channels, channels, 1, true);
            self.conv(&format!("{prefix}.step{s}.v"), channels, channels, 1, true);
        }
        self.conv(&format!("{prefix}.fuse"), channels, channels, 1, true);
    }

    /// Cross-feature fusion over `input_channels.len()` streams.
    pub fn cfm(&mut self, prefix: &str, input_channels: &[usize], oc: usize) {
        for (i, &ic) in input_channels.iter().enumerate() {
            self.conv_gn(&format!("{prefix}.in{i}.0"), ic, oc);
            self.conv_gn(&format!("{prefix}.in{i}.1"), oc, oc);
        }
        self.conv_gn(&format!("{prefix}.out"), oc, oc);
    }
}

/// Smallest multiple of `branches` that is >= `channels`.
pub fn mrffam_width(channels: usize, branches: usize) -> usize {
    channels.div_ceil(branches) * branches
}

/// Pairwise steps down the pyramid plus the final step against the stack
/// input. A single-level stack degenerates to one self-attention step.
pub fn attention_step_count(levels: usize) -> usize {
    if levels <= 1 {
        1
    } else {
        levels
    }
}

/// Number of pyramid levels needed to reach `lowest` from `resolution` by
/// repeated halving.
pub fn msa_levels(resolution: usize, lowest: usize) -> Result<usize> {
    if lowest == 0 || !resolution.is_multiple_of(lowest) {
        return Err(Error::InvalidConfig(format!(
            "pyramid cannot reach {lowest} from {resolution} by factor-2 pooling"
        )));
    }
    let ratio = resolution / lowest;
    if !ratio.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "pyramid ratio {ratio} is not a power of two"
        )));
    }
    Ok(ratio.trailing_zeros() as usize + 1)
}

// ---- forward -------------------------------------------------------------

/// Binds parameters onto a tape on first use and runs block forwards.
pub struct NetCtx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    params: &'a ParamMap<S>,
    buffers: &'a mut BufferMap<S>,
    vars: BTreeMap<String, Var>,
    pub groups: usize,
    pub heads: usize,
    pub training: bool,
    pub trainable: bool,
}

impl<'a, S: Scalar> NetCtx<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        params: &'a ParamMap<S>,
        buffers: &'a mut BufferMap<S>,
        groups: usize,
        heads: usize,
        training: bool,
        trainable: bool,
    ) -> Self {
        NetCtx {
            tape,
            params,
            buffers,
            vars: BTreeMap::new(),
            groups,
            heads,
            training,
            trainable,
        }
    }

    /// Pre-bind a path to an existing tape var, overriding the stored
    /// parameter. Lets an audit differentiate with respect to one parameter.
    pub fn bind(&mut self, path: &str, v: Var) {
        self.vars.insert(path.to_string(), v);
    }

    /// Tape var for a named parameter, registering it as a leaf on first use.
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(path) {
            return Ok(v);
        }
        let t = self
            .params
            .get(path)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter '{path}'")))?
            .clone();
        let v = self.tape.leaf(t, self.trainable);
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn used_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn conv(&mut self, prefix: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_path = format!("{prefix}.bias");
        let bias = if self.params.contains_key(&bias_path) {
            Some(self.param(&bias_path)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, bias, spec)
    }

    fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        let mean_path = format!("{prefix}.running_mean");
        let var_path = format!("{prefix}.running_var");
        let mut rm = self
            .buffers
            .get(&mean_path)
            .ok_or_else(|| Error::InvalidConfig(format!("missing buffer '{mean_path}'")))?
            .data()
            .to_vec();
        let mut rv = self.buffers[&var_path].data().to_vec();
        let out = self.tape.batch_norm(
            x,
            scale,
            shift,
            &mut rm,
            &mut rv,
            BN_MOMENTUM,
            BN_EPS,
            self.training,
        )?;
        if self.training {
            let c = rm.len();
            self.buffers
                .insert(mean_path, Tensor::from_vec(Shape::new(1, 1, 1, c), rm)?);
            self.buffers
                .insert(var_path, Tensor::from_vec(Shape::new(1, 1, 1, c), rv)?);
        }
        Ok(out)
    }

    fn group_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        self.tape.group_norm(x, scale, shift, self.groups, GN_EPS)
    }

    /// ConvB(x, d): ReLU(BN(conv 3x3 dilation d)), "same" padding.
    pub fn conv_b(&mut self, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
        let c = self.conv(&format!("{prefix}.conv"), x, ConvSpec::same_3x3(dilation))?;
        let n = self.batch_norm(&format!("{prefix}.bn"), c)?;
        Ok(self.tape.relu(n))
    }

    /// Double_Conv(x): two ConvB at dilation 1.
    pub fn double_conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let a = self.conv_b(&format!("{prefix}.0"), x, 1)?;
        self.conv_b(&format!("{prefix}.1"), a, 1)
    }

    /// Down(x): Double_Conv(max_pool(x)), halving the spatial dims.
    pub fn down_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let s = self.tape.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::arg(
                "down_block",
                format!("spatial dims must be even, got {s}"),
            ));
        }
        let pooled = self.tape.max_pool2d(x, 2, 2, 0)?;
        self.double_conv(prefix, pooled)
    }

    /// Up(x, y): Double_Conv(cat(upsample2(x), y)).
    pub fn up_block(&mut self, prefix: &str, x: Var, skip: Var) -> Result<Var> {
        let up = self.tape.bilinear_upsample(x, 2)?;
        let (us, ss) = (self.tape.shape(up), self.tape.shape(skip));
        if us.h != ss.h || us.w != ss.w {
            return Err(Error::shape("up_block", us, ss));
        }
        let cat = self.tape.concat(&[up, skip])?;
        self.double_conv(prefix, cat)
    }

    /// GroupNorm Conv layer used inside the fusion module.
    pub fn conv_gn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let c = self.conv(&format!("{prefix}.conv"), x, ConvSpec::same_3x3(1))?;
        let n = self.group_norm(&format!("{prefix}.gn"), c)?;
        Ok(self.tape.relu(n))
    }

    /// Multi-receptive-field feature aggregation: project, split channels
    /// across dilated branches, run two serial dilated ConvB per branch,
    /// concat, fuse back down with a 1x1 conv.
    pub fn mrffam(&mut self, prefix: &str, x: Var, rates: &[usize]) -> Result<Var> {
        if rates.is_empty() {
            return Err(Error::arg("mrffam", "rate list must be nonempty"));
        }
        let projected = self.conv(&format!("{prefix}.proj"), x, ConvSpec::unit())?;
        let width = self.tape.shape(projected).c;
        let per = width / rates.len();
        let mut branches = Vec::with_capacity(rates.len());
        for (g, &rate) in rates.iter().enumerate() {
            let slice = self.tape.slice_channels(projected, g * per, per)?;
            let a = self.conv_b(&format!("{prefix}.branch{g}.0"), slice, rate)?;
            let b = self.conv_b(&format!("{prefix}.branch{g}.1"), a, rate)?;
            branches.push(b);
        }
        let cat = self.tape.concat(&branches)?;
        self.conv(&format!("{prefix}.fuse"), cat, ConvSpec::unit())
    }

    /// Local processing at two scales: a full-resolution ConvB beside a
    /// twice-max-pooled ConvB chain brought back up by a factor-4 upsample.
    pub fn lpm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let s = self.tape.shape(x);
        if !s.h.is_multiple_of(4) || !s.w.is_multiple_of(4) {
            return Err(Error::arg(
                "lpm",
                format!("spatial dims must be divisible by 4, got {s}"),
            ));
        }
        let local = self.conv_b(&format!("{prefix}.local"), x, 1)?;
        let p1 = self.tape.max_pool2d(x, 2, 2, 0)?;
        let c1 = self.conv_b(&format!("{prefix}.down1"), p1, 1)?;
        let p2 = self.tape.max_pool2d(c1, 2, 2, 0)?;
        let c2 = self.conv_b(&format!("{prefix}.down2"), p2, 1)?;
        let up = self.tape.bilinear_upsample(c2, 4)?;
        let cat = self.tape.concat(&[local, up])?;
        self.conv(&format!("{prefix}.fuse"), cat, ConvSpec::unit())
    }

    /// One cross-resolution attention step: queries from the coarser map,
    /// keys/values from the finer one. Output spatial size equals the
    /// query's.
    fn msa_step(&mut self, prefix: &str, query_map: Var, kv_map: Var) -> Result<Var> {
        let qs = self.tape.shape(query_map);
        let q = self.conv(&format!("{prefix}.q"), query_map, ConvSpec::unit())?;
        let k = self.conv(&format!("{prefix}.k"), kv_map, ConvSpec::unit())?;
        let v = self.conv(&format!("{prefix}.v"), kv_map, ConvSpec::unit())?;
        let qt = self.tape.flatten_tokens(q)?;
        let kt = self.tape.flatten_tokens(k)?;
        let vt = self.tape.flatten_tokens(v)?;
        let (qh, kh, vh) = if self.heads > 1 {
            (
                self.tape.split_heads(qt, self.heads)?,
                self.tape.split_heads(kt, self.heads)?,
                self.tape.split_heads(vt, self.heads)?,
            )
        } else {
            (qt, kt, vt)
        };
        let out = self.tape.attention(qh, kh, vh)?;
        let merged = if self.heads > 1 {
            self.tape.merge_heads(out)?
        } else {
            out
        };
        let spatial = self.tape.unflatten_tokens(merged, qs.h, qs.w)?;
        debug_assert_eq!(self.tape.shape(spatial).spatial(), qs.spatial());
        Ok(spatial)
    }

    /// Pyramid attention: average-pool/refine down to the `lowest`
    /// resolution, run attention pairwise from the two finest levels down,
    /// then once more between the coarsest result and the stack input, and
    /// carry the result back up to x's resolution.
    pub fn msa(&mut self, prefix: &str, x: Var, lowest: usize) -> Result<Var> {
        let s = self.tape.shape(x);
        let levels = msa_levels(s.h, lowest)?;
        if !s.w.is_multiple_of(s.h / lowest) {
            return Err(Error::InvalidConfig(format!(
                "pyramid over {s} cannot halve width to match height steps"
            )));
        }

        let mut pyramid = vec![x];
        for k in 1..levels {
            let pooled = self.tape.avg_pool2d(pyramid[k - 1], 2, 2, 0)?;
            let refined = self.double_conv(&format!("{prefix}.pyr{k}"), pooled)?;
            pyramid.push(refined);
        }

        let mut step = 0;
        let mut current = pyramid[0];
        for &level in pyramid.iter().skip(1) {
            // Queries from the smaller map, keys/values from the larger.
            current = self.msa_step(&format!("{prefix}.step{step}"), level, current)?;
            step += 1;
        }
        // Final step against the input of the stack.
        let lowest_out = self.msa_step(&format!("{prefix}.step{step}"), current, pyramid[0])?;

        let factor = s.h / self.tape.shape(lowest_out).h;
        let restored = if factor > 1 {
            self.tape.bilinear_upsample(lowest_out, factor)?
        } else {
            lowest_out
        };
        self.conv(&format!("{prefix}.fuse"), restored, ConvSpec::unit())
    }

    /// Cross-feature fusion: refine each stream with two GroupNorm Conv
    /// layers, multiply each refined stream with the sum of all of them,
    /// add the products up, and finish with one more Conv layer. A single
    /// stream has nothing to cross with and passes straight to the final
    /// Conv, giving three serial Conv layers.
    pub fn cfm(&mut self, prefix: &str, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::arg("cfm", "input list must be nonempty"));
        }
        let first = self.tape.shape(inputs[0]);
        for &v in inputs {
            let s = self.tape.shape(v);
            if s.h != first.h || s.w != first.w {
                return Err(Error::shape("cfm", first, s));
            }
        }
        let mut refined = Vec::with_capacity(inputs.len());
        for (i, &input) in inputs.iter().enumerate() {
            let a = self.conv_gn(&format!("{prefix}.in{i}.0"), input)?;
            let b = self.conv_gn(&format!("{prefix}.in{i}.1"), a)?;
            refined.push(b);
        }
        let fused = if refined.len() == 1 {
            refined[0]
        } else {
            let mut total = refined[0];
            for &r in &refined[1..] {
                total = self.tape.add(total, r)?;
            }
            let mut acc: Option<Var> = None;
            for &r in &refined {
                let prod = self.tape.mul(r, total)?;
                acc = Some(match acc {
                    Some(a) => self.tape.add(a, prod)?,
                    None => prod,
                });
            }
            acc.unwrap()
        };
        self.conv_gn(&format!("{prefix}.out"), fused)
    }
}
