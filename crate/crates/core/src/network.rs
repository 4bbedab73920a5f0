//! Whole-network assembly: stem, hybrid encoder blocks, bottleneck, decoder
//! blocks with U-Net skips, and the saliency/contour heads, plus parameter
//! accounting, checkpoint serialization, and a symbolic shape trace.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::blocks::{self, BufferMap, Init, NetCtx, ParamMap};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvSpec;
use crate::rng;
use crate::scalar::Scalar;
use crate::swt;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter totals reported alongside ours; matching is informational.
pub const PUBLISHED_PARAMS_FULL: f64 = 9.03e6;
pub const PUBLISHED_PARAMS_SMALL: f64 = 3.03e6;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SWCKPT1\0";

#[derive(Debug, Clone)]
pub struct NetworkState<S: Scalar> {
    pub config: NetworkConfig,
    pub params: ParamMap<S>,
    pub buffers: BufferMap<S>,
}

pub struct ForwardOutput {
    pub saliency: Var,
    pub contour: Option<Var>,
    /// Tape vars of every parameter touched by the forward, keyed by path.
    pub param_vars: BTreeMap<String, Var>,
}

/// Channel widths derived from the config; everything is a multiple of the
/// stem width.
#[derive(Debug, Clone, Copy)]
pub struct Widths {
    pub stem: usize,
    pub encoder_out: usize,
}

impl NetworkConfig {
    pub fn widths(&self) -> Widths {
        let stem = self.stem_channels();
        Widths {
            stem,
            encoder_out: 2 * stem,
        }
    }

    /// Coarsest attention pyramid resolution, H/16 of the network input.
    pub fn msa_lowest(&self) -> usize {
        self.input_resolution / 16
    }
}

fn hybrid_branch_channels(config: &NetworkConfig, c: usize) -> Vec<usize> {
    let mut v = Vec::new();
    if config.enable_mrffam {
        v.push(c);
    }
    if config.enable_lpm {
        v.push(c);
    }
    if config.enable_msa {
        v.push(c);
    }
    v
}

/// Deterministically initialize all parameters for the configured topology.
pub fn assemble_network<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<NetworkState<S>> {
    config.validate()?;
    let w = config.widths();
    let (c, c2) = (w.stem, w.encoder_out);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut rng = rng::seeded(seed);
    let mut init = Init::new(&mut params, &mut buffers, &mut rng);

    init.double_conv("stem", 3, c);

    let hb1_levels = blocks::msa_levels(config.input_resolution / 2, config.msa_lowest())?;
    let hb2_levels = blocks::msa_levels(config.input_resolution / 4, config.msa_lowest())?;
    init_hybrid_block(&mut init, config, "hb1", "HB1", c, c2, hb1_levels)?;
    init_hybrid_block(&mut init, config, "hb2", "HB2", c2, c2, hb2_levels)?;

    init.double_conv("bottleneck", c2, c);

    init_decoder_block(&mut init, config, "cb2", "CB2", c)?;
    init_decoder_block(&mut init, config, "cb3", "CB3", c)?;

    // Skip fusions after each decoder block: concat with the encoder skip,
    // then Double_Conv back down to the decoder width.
    init.double_conv("up2", c + c2, c);
    init.double_conv("up3", c + c, c);

    init.conv("head_sal", 1, c, 1, true);
    if config.enable_contour_head {
        init.conv("head_con", 1, c, 1, true);
    }

    Ok(NetworkState {
        config: config.clone(),
        params,
        buffers,
    })
}

impl<S: Scalar> NetworkState<S> {
    /// Run the network on a batch already recorded on `tape`. `trainable`
    /// controls whether parameters are registered as gradient leaves.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape<S>,
        batch: Var,
        training: bool,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        self.forward_with_bindings(tape, batch, training, trainable, &[])
    }

    /// Like `forward_on`, but with named parameters pre-bound to existing
    /// tape vars, so an audit can differentiate with respect to them.
    pub fn forward_with_bindings(
        &mut self,
        tape: &mut Tape<S>,
        batch: Var,
        training: bool,
        trainable: bool,
        bindings: &[(&str, Var)],
    ) -> Result<ForwardOutput> {
        let bs = tape.shape(batch);
        if bs.c != 3 {
            return Err(Error::arg(
                "forward",
                format!("input must have 3 channels, got {bs}"),
            ));
        }
        if bs.h != self.config.input_resolution || bs.w != self.config.input_resolution {
            return Err(Error::arg(
                "forward",
                format!(
                    "input resolution {}x{} does not match configured {}",
                    bs.h, bs.w, self.config.input_resolution
                ),
            ));
        }
        let config = self.config.clone();
        let lowest = config.msa_lowest();
        let mut ctx = NetCtx::new(
            tape,
            &self.params,
            &mut self.buffers,
            config.groupnorm_groups,
            config.attention_heads,
            training,
            trainable,
        );
        for (path, var) in bindings {
            ctx.bind(path, *var);
        }

        let stem_full = ctx.double_conv("stem", batch)?;
        let skip0 = ctx.tape.max_pool2d(stem_full, 2, 2, 0)?;

        let e1 = hybrid_block(&mut ctx, &config, "hb1", "HB1", skip0, lowest)?;
        let e2 = hybrid_block(&mut ctx, &config, "hb2", "HB2", e1, lowest)?;

        let bott = ctx.double_conv("bottleneck", e2)?;

        let d2 = decoder_block(&mut ctx, &config, "cb2", "CB2", bott)?;
        let m2 = {
            let cat = ctx.tape.concat(&[d2, e1])?;
            ctx.double_conv("up2", cat)?
        };

        let d3 = decoder_block(&mut ctx, &config, "cb3", "CB3", m2)?;
        let m3 = {
            let cat = ctx.tape.concat(&[d3, skip0])?;
            ctx.double_conv("up3", cat)?
        };

        let sal_half = conv_head(&mut ctx, "head_sal", m3)?;
        let saliency = ctx.tape.bilinear_upsample(sal_half, 2)?;
        let contour = if config.enable_contour_head {
            let con_half = conv_head(&mut ctx, "head_con", m3)?;
            Some(ctx.tape.bilinear_upsample(con_half, 2)?)
        } else {
            None
        };

        let param_vars: BTreeMap<String, Var> =
            ctx.used_params().map(|(k, v)| (k.clone(), *v)).collect();
        debug_assert_eq!(
            param_vars.len(),
            self.params.len(),
            "forward must touch every parameter"
        );
        Ok(ForwardOutput {
            saliency,
            contour,
            param_vars,
        })
    }

    /// Convenience wrapper that owns the tape: feed one batch, get logits.
    pub fn forward(
        &mut self,
        batch: &Tensor<S>,
        training: bool,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false);
        let out = self.forward_on(&mut tape, input, training, false)?;
        let sal = tape.value(out.saliency).clone();
        let con = out.contour.map(|v| tape.value(v).clone());
        Ok((sal, con))
    }

    /// Element count of every parameter tensor by path.
    pub fn path_counts(&self) -> impl Iterator<Item = (&String, usize)> {
        self.params.iter().map(|(path, t)| (path, t.numel()))
    }

    /// Element counts per top-level module and in total. Buffers (running
    /// statistics) are not parameters and are excluded.
    pub fn count_parameters(&self) -> (BTreeMap<String, usize>, usize) {
        let mut per_module: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0;
        for (path, t) in &self.params {
            let module = path.split('.').next().unwrap_or(path).to_string();
            *per_module.entry(module).or_insert(0) += t.numel();
            total += t.numel();
        }
        (per_module, total)
    }

    // ---- checkpoint io -----------------------------------------------------

    /// Container layout: magic, length-prefixed canonical config JSON, record
    /// count, then per record a length-prefixed UTF-8 path and an SWT1 tensor,
    /// and finally a CRC32 of all preceding bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());

        let n = self.params.len() + self.buffers.len();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (path, tensor) in self.params.iter().chain(self.buffers.iter()) {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&swt::encode(tensor));
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NetworkState<S>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }

        let mut pos = 8;
        let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
            if *pos + 4 > bytes.len() {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            Ok(v)
        };
        let config_len = read_u32(body, &mut pos)? as usize;
        let config: NetworkConfig = serde_json::from_slice(&body[pos..pos + config_len])
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        pos += config_len;
        let n = read_u32(body, &mut pos)? as usize;

        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for _ in 0..n {
            let path_len = read_u32(body, &mut pos)? as usize;
            let name = String::from_utf8(body[pos..pos + path_len].to_vec())
                .map_err(|e| Error::Format(format!("checkpoint path: {e}")))?;
            pos += path_len;
            let (tensor, used) = swt::decode::<S>(&body[pos..])?;
            pos += used;
            if name.contains(".running_") {
                buffers.insert(name, tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        if pos != body.len() {
            return Err(Error::Format("trailing bytes inside checkpoint".into()));
        }
        Ok(NetworkState {
            config,
            params,
            buffers,
        })
    }
}

fn conv_head<S: Scalar>(ctx: &mut NetCtx<S>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ctx.tape.conv2d(x, w, Some(b), ConvSpec::unit())
}

/// Parameters for one hybrid block at the given width.
pub fn init_hybrid_block<S: Scalar>(
    init: &mut Init<S>,
    config: &NetworkConfig,
    prefix: &str,
    schedule_key: &str,
    channels: usize,
    out_channels: usize,
    msa_levels: usize,
) -> Result<()> {
    let rates = config.dilation_schedule.rates_for(schedule_key)?.to_vec();
    if config.enable_mrffam {
        init.mrffam(&format!("{prefix}.mrffam"), channels, channels, &rates);
    }
    if config.enable_lpm {
        init.lpm(&format!("{prefix}.lpm"), channels);
    }
    if config.enable_msa {
        init.msa(&format!("{prefix}.msa"), channels, msa_levels);
    }
    init.cfm(
        &format!("{prefix}.cfm"),
        &hybrid_branch_channels(config, channels),
        channels,
    );
    init.conv(&format!("{prefix}.down"), out_channels, channels, 1, true);
    Ok(())
}

/// Parameters for one decoder block at the given width.
pub fn init_decoder_block<S: Scalar>(
    init: &mut Init<S>,
    config: &NetworkConfig,
    prefix: &str,
    schedule_key: &str,
    channels: usize,
) -> Result<()> {
    let rates = config.dilation_schedule.rates_for(schedule_key)?.to_vec();
    if config.enable_mrffam_decoder {
        init.mrffam(&format!("{prefix}.mrffam"), channels, channels, &rates);
    }
    let streams: Vec<usize> = if config.enable_mrffam_decoder {
        vec![channels, channels]
    } else {
        vec![channels]
    };
    init.cfm(&format!("{prefix}.cfm"), &streams, channels);
    Ok(())
}

/// Encoder block: the enabled branches in (mrffam, lpm, msa) order feed the
/// fusion module; the fused map is max-pooled and widened by a 1x1 conv.
pub fn hybrid_block<S: Scalar>(
    ctx: &mut NetCtx<S>,
    config: &NetworkConfig,
    prefix: &str,
    schedule_key: &str,
    x: Var,
    lowest: usize,
) -> Result<Var> {
    let mut branches = Vec::new();
    if config.enable_mrffam {
        let rates = config.dilation_schedule.rates_for(schedule_key)?.to_vec();
        branches.push(ctx.mrffam(&format!("{prefix}.mrffam"), x, &rates)?);
    }
    if config.enable_lpm {
        branches.push(ctx.lpm(&format!("{prefix}.lpm"), x)?);
    }
    if config.enable_msa {
        branches.push(ctx.msa(&format!("{prefix}.msa"), x, lowest)?);
    }
    if branches.is_empty() {
        return Err(Error::InvalidConfig(
            "hybrid block needs at least one enabled branch".into(),
        ));
    }
    let fused = ctx.cfm(&format!("{prefix}.cfm"), &branches)?;
    let pooled = ctx.tape.max_pool2d(fused, 2, 2, 0)?;
    let w = ctx.param(&format!("{prefix}.down.weight"))?;
    let b = ctx.param(&format!("{prefix}.down.bias"))?;
    ctx.tape.conv2d(pooled, w, Some(b), ConvSpec::unit())
}

/// Decoder block: fuse the dilated refinement with the identity stream,
/// then carry the result up one resolution level.
pub fn decoder_block<S: Scalar>(
    ctx: &mut NetCtx<S>,
    config: &NetworkConfig,
    prefix: &str,
    schedule_key: &str,
    x: Var,
) -> Result<Var> {
    let inputs = if config.enable_mrffam_decoder {
        let rates = config.dilation_schedule.rates_for(schedule_key)?.to_vec();
        vec![ctx.mrffam(&format!("{prefix}.mrffam"), x, &rates)?, x]
    } else {
        vec![x]
    };
    let fused = ctx.cfm(&format!("{prefix}.cfm"), &inputs)?;
    ctx.tape.bilinear_upsample(fused, 2)
}

// ---- symbolic shape trace --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub block: String,
    /// (height, width, channels) entering the block's dilated module.
    pub input: (usize, usize, usize),
    pub rates: Vec<usize>,
    /// (height, width, channels) leaving the block.
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ShapeTrace {
    pub rows: Vec<TraceRow>,
    pub graph: Vec<String>,
}

/// Propagate shapes through the topology without touching any tensor data.
pub fn shape_trace(config: &NetworkConfig) -> Result<ShapeTrace> {
    config.validate()?;
    let w = config.widths();
    let (c, c2) = (w.stem, w.encoder_out);
    let r = config.input_resolution;
    let sched = &config.dilation_schedule;

    let rows = vec![
        TraceRow {
            block: "HB1".into(),
            input: (r / 2, r / 2, c),
            rates: sched.rates_for("HB1")?.to_vec(),
            output: (r / 4, r / 4, c2),
        },
        TraceRow {
            block: "HB2".into(),
            input: (r / 4, r / 4, c2),
            rates: sched.rates_for("HB2")?.to_vec(),
            output: (r / 8, r / 8, c2),
        },
        TraceRow {
            block: "CB2".into(),
            input: (r / 8, r / 8, c),
            rates: sched.rates_for("CB2")?.to_vec(),
            output: (r / 8, r / 8, c),
        },
        TraceRow {
            block: "CB3".into(),
            input: (r / 4, r / 4, c),
            rates: sched.rates_for("CB3")?.to_vec(),
            output: (r / 4, r / 4, c),
        },
    ];

    let fmt = |h: usize, cc: usize| format!("{h}x{h}x{cc}");
    let mut graph = vec![
        format!("input            {}", fmt(r, 3)),
        format!("stem Double_Conv {}", fmt(r, c)),
        format!("stem max_pool    {}", fmt(r / 2, c)),
    ];
    let mut branch_names = Vec::new();
    if config.enable_mrffam {
        branch_names.push("MRFFAM");
    }
    if config.enable_lpm {
        branch_names.push("LPM");
    }
    if config.enable_msa {
        branch_names.push("MSA");
    }
    let branches = branch_names.join("+");
    graph.push(format!(
        "HB1 [{branches}] -> CFM {} -> down {}",
        fmt(r / 2, c),
        fmt(r / 4, c2)
    ));
    graph.push(format!(
        "HB2 [{branches}] -> CFM {} -> down {}",
        fmt(r / 4, c2),
        fmt(r / 8, c2)
    ));
    graph.push(format!("bottleneck       {}", fmt(r / 8, c)));
    let dec = if config.enable_mrffam_decoder {
        "MRFFAM+identity"
    } else {
        "identity"
    };
    graph.push(format!(
        "CB2 [{dec}] -> CFM {} -> up {}",
        fmt(r / 8, c),
        fmt(r / 4, c)
    ));
    graph.push(format!("up2 skip fuse    {}", fmt(r / 4, c)));
    graph.push(format!(
        "CB3 [{dec}] -> CFM {} -> up {}",
        fmt(r / 4, c),
        fmt(r / 2, c)
    ));
    graph.push(format!("up3 skip fuse    {}", fmt(r / 2, c)));
    graph.push(format!("saliency head    {}", fmt(r, 1)));
    if config.enable_contour_head {
        graph.push(format!("contour head     {}", fmt(r, 1)));
    }
    Ok(ShapeTrace { rows, graph })
}

/// Signed difference against the published parameter total for the variant.
pub fn published_delta(config: &NetworkConfig, total: usize) -> f64 {
    let published = match config.variant {
        crate::config::Variant::Full => PUBLISHED_PARAMS_FULL,
        crate::config::Variant::Small => PUBLISHED_PARAMS_SMALL,
    };
    total as f64 - published
}

/// The reference schedule restated as trace rows; the full config at the
/// reference resolution must realize it exactly.
pub fn reference_rows() -> Vec<TraceRow> {
    crate::config::DilationSchedule::reference()
        .entries
        .into_iter()
        .map(|e| TraceRow {
            block: e.block,
            input: (e.input.0, e.input.1, e.input.2),
            rates: e.rates,
            output: (e.output.0, e.output.1, e.output.2),
        })
        .collect()
}
