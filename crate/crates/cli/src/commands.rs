//! Command implementations behind the clap surface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sodawidenet::audit::{self, Scope};
use sodawidenet::config::{NetworkConfig, Variant};
use sodawidenet::data::{self, DatasetManifest};
use sodawidenet::error::{Error, Result};
use sodawidenet::metrics::{self, EMeasureMode, EvalOptions, EvalPair, FMeasureProtocol};
use sodawidenet::netpbm;
use sodawidenet::network::{
    assemble_network, published_delta, shape_trace, NetworkState, PUBLISHED_PARAMS_FULL,
    PUBLISHED_PARAMS_SMALL,
};
use sodawidenet::tensor::Tensor;
use sodawidenet::train::{run_training, TrainOptions};

use crate::runcfg::RunConfig;

/// Line sink writing to stdout and optionally a log file.
pub struct Logger {
    file: Option<std::fs::File>,
    quiet_stdout: bool,
}

impl Logger {
    pub fn new(path: Option<&Path>, quiet_stdout: bool) -> Result<Logger> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    if !dir.as_os_str().is_empty() {
                        std::fs::create_dir_all(dir)?;
                    }
                }
                Some(std::fs::File::create(p)?)
            }
            None => None,
        };
        Ok(Logger { file, quiet_stdout })
    }

    pub fn line(&mut self, text: &str) {
        if !self.quiet_stdout {
            println!("{text}");
        }
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{text}");
        }
    }
}

pub fn cmd_train(run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&run.out_dir)?;
    let mut logger = Logger::new(Some(&run.log_path), true)?;
    let echo =
        serde_json::to_string(run).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    println!("resolved config: {echo}");
    logger.line(&echo);

    let manifest = DatasetManifest::load(&run.manifest)?;
    let mut state: NetworkState<f32> = assemble_network(&run.network, run.seed)?;
    let options = TrainOptions {
        optimizer: run.optimizer,
        schedule: run.schedule,
        loss: run.loss,
        batch_size: run.batch_size,
        seed: run.seed,
        checkpoint_dir: run.out_dir.clone(),
    };
    let started = Instant::now();
    let summary = run_training(&mut state, &manifest, &options, |line| logger.line(line))?;
    println!(
        "trained {} steps over {} epochs in {:.1}s; saliency loss {:.4} -> {:.4}; best epoch {} ({})",
        summary.steps,
        run.schedule.epochs,
        started.elapsed().as_secs_f64(),
        summary.first_saliency_total,
        summary.last_saliency_total,
        summary.best_epoch,
        summary.best_checkpoint.display(),
    );
    Ok(())
}

pub fn cmd_infer(
    checkpoint: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    resolution_override: Option<usize>,
) -> Result<()> {
    let mut state = NetworkState::<f32>::load(checkpoint)?;
    if let Some(r) = resolution_override {
        if r != state.config.input_resolution {
            return Err(Error::InvalidConfig(format!(
                "requested resolution {r} does not match checkpoint resolution {}",
                state.config.input_resolution
            )));
        }
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    std::fs::create_dir_all(out_dir)?;
    let resolution = state.config.input_resolution;
    for (idx, entry) in manifest.entries.iter().enumerate() {
        let started = Instant::now();
        let sample: data::Sample<f32> = data::load_sample(&manifest.root, entry, resolution)?;
        let (logits, _) = state.forward(&sample.image, false)?;
        let name = manifest.stem(idx);
        let out_path = out_dir.join(format!("{name}.pgm"));
        data::write_saliency(&logits, true, &out_path, false)?;
        println!(
            "{name}: {} in {:.0} ms",
            out_path.display(),
            started.elapsed().as_secs_f64() * 1e3
        );
    }
    println!(
        "wrote {} saliency maps to {}",
        manifest.len(),
        out_dir.display()
    );
    Ok(())
}

pub struct EvalFlags {
    pub beta_squared: f64,
    pub e_measure: EMeasureMode,
    pub per_image_f: bool,
}

pub fn cmd_eval(
    pred_dir: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    flags: &EvalFlags,
) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let gt_files: Vec<(String, PathBuf)> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (manifest.stem(i), manifest.root.join(&e.mask)))
        .collect();
    let paired = metrics::pair_prediction_files(pred_dir, &gt_files)?;

    let mut pairs = Vec::with_capacity(paired.len());
    for (name, pred_path, gt_path) in paired {
        let pred_img = netpbm::read_pgm(&pred_path)?;
        let gt_img = netpbm::read_pgm(&gt_path)?;
        let to_tensor = |img: &netpbm::GrayImage| -> Result<Tensor<f64>> {
            Tensor::from_vec(
                sodawidenet::Shape::new(1, 1, img.height, img.width),
                img.pixels.iter().map(|&v| v as f64 / 255.0).collect(),
            )
        };
        let pred = to_tensor(&pred_img)?;
        let mut gt = to_tensor(&gt_img)?;
        if gt.shape() != pred.shape() {
            // Predictions are produced at the network resolution; bring the
            // ground truth onto the same grid.
            let (data_resized, os) = sodawidenet::kernels::resize::bilinear_forward(
                gt.data(),
                gt.shape(),
                pred.shape().h,
                pred.shape().w,
            )?;
            gt = Tensor::from_vec(os, data_resized)?;
        }
        pairs.push(EvalPair { name, pred, gt });
    }

    let opts = EvalOptions {
        beta_squared: flags.beta_squared,
        e_mode: flags.e_measure,
        f_protocol: if flags.per_image_f {
            FMeasureProtocol::PerImage
        } else {
            FMeasureProtocol::DatasetPooled
        },
    };
    let report = metrics::evaluate_dataset(&pairs, &opts)?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics::csv_report(&report))?;
    let aggregate = serde_json::json!({
        "mae": report.mae,
        "f_max": report.f_max,
        "e_max": report.e_max,
        "n_images": report.n_images,
    });
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&aggregate).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    println!(
        "mae {:.4}  f_max {:.4}  e_max {:.4}  over {} images",
        report.mae, report.f_max, report.e_max, report.n_images
    );
    println!(
        "reports: {}/metrics.csv, {}/metrics.json",
        out_dir.display(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(scopes: &[Scope], seed: u64) -> Result<()> {
    let mut failures = 0;
    for &scope in scopes {
        let started = Instant::now();
        let outcomes = audit::run_scope(scope, seed)?;
        for o in &outcomes {
            let status = if o.passed() { "pass" } else { "FAIL" };
            println!(
                "{status}  {:>32}  max rel err {:.3e}  (tol {:.0e}, {} coords)",
                o.name, o.max_rel_err, o.tolerance, o.coords
            );
            if !o.passed() {
                failures += 1;
            }
        }
        println!(
            "scope {:?}: {} items in {:.1}s",
            scope,
            outcomes.len(),
            started.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        return Err(Error::Numerical(format!(
            "{failures} gradient audits failed"
        )));
    }
    Ok(())
}

pub fn cmd_inspect(config: &NetworkConfig, seed: u64) -> Result<()> {
    let trace = shape_trace(config)?;
    println!("layer graph at {0}x{0}:", config.input_resolution);
    for line in &trace.graph {
        println!("  {line}");
    }
    println!();
    println!("realized dilation schedule:");
    println!(
        "  {:<5} {:>14} {:>20} {:>14}",
        "block", "input", "rates", "output"
    );
    for row in &trace.rows {
        let rates = row
            .rates
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        println!(
            "  {:<5} {:>14} {:>20} {:>14}",
            row.block,
            format!("{}x{}x{}", row.input.0, row.input.1, row.input.2),
            rates,
            format!("{}x{}x{}", row.output.0, row.output.1, row.output.2),
        );
    }
    println!();

    let state: NetworkState<f32> = assemble_network(config, seed)?;
    let (per_module, total) = state.count_parameters();
    println!("parameters by module:");
    for (module, count) in &per_module {
        println!("  {module:<12} {count:>10}");
    }
    let published = match config.variant {
        Variant::Full => PUBLISHED_PARAMS_FULL,
        Variant::Small => PUBLISHED_PARAMS_SMALL,
    };
    let delta = published_delta(config, total);
    println!(
        "total {total} ({:.3}M); published {:.2}M; delta {:+.3}M",
        total as f64 / 1e6,
        published / 1e6,
        delta / 1e6
    );
    Ok(())
}

pub fn cmd_synth(seed: u64, count: usize, resolution: usize, out_dir: &Path) -> Result<()> {
    let manifest = data::synth_dataset(seed, count, resolution, out_dir)?;
    println!(
        "generated {count} samples at {resolution}x{resolution}; manifest {}",
        manifest.display()
    );
    Ok(())
}
