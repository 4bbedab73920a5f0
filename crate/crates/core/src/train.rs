//! Training loop: Adam over the saliency + contour objective with a step
//! learning-rate schedule, JSON-lines logging, and per-epoch checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::loss::{contour_loss_on, salient_loss_on, LossConfig, LossReport};
use crate::network::NetworkState;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 41,
            lr_drop_epoch: 30,
            lr_drop_factor: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            base_lr * self.lr_drop_factor
        } else {
            base_lr
        }
    }
}

/// First-moment/second-moment state per parameter path.
pub struct Adam<S: Scalar> {
    cfg: OptimizerConfig,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
    t: usize,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: OptimizerConfig) -> Adam<S> {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over (path, gradient) pairs; parameters are replaced in
    /// the state map. Iteration order is the map order, so updates are
    /// deterministic.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        let eps = S::from_f64(self.cfg.epsilon);

        for (path, tensor) in params.iter_mut() {
            let grad = match grads.get(path) {
                Some(g) => g,
                None => continue,
            };
            if grad.shape() != tensor.shape() {
                return Err(Error::shape("adam", tensor.shape(), grad.shape()));
            }
            let n = tensor.numel();
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| vec![S::ZERO; n]);
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| vec![S::ZERO; n]);
            let mut data = tensor.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i].to_f64() / bc1;
                let v_hat = v[i].to_f64() / bc2;
                data[i] -= S::from_f64(lr * m_hat / (v_hat.sqrt() + eps.to_f64()));
            }
            *tensor = Tensor::from_vec(tensor.shape(), data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub saliency: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contour: Option<LossReport>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_saliency_total: f64,
    pub last_saliency_total: f64,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
}

/// Stack per-sample tensors along the batch axis.
pub fn stack_batch<S: Scalar>(tensors: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if tensors.is_empty() {
        return Err(Error::arg("stack_batch", "empty batch"));
    }
    let first = tensors[0].shape();
    let shape = Shape::new(tensors.len() * first.n, first.c, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for t in tensors {
        if t.shape() != first {
            return Err(Error::shape("stack_batch", first, t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(shape, data)
}

/// One optimization step on an already-stacked batch. Returns the log
/// record for the step.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    state: &mut NetworkState<S>,
    adam: &mut Adam<S>,
    images: &Tensor<S>,
    masks: &Tensor<S>,
    contours: &Tensor<S>,
    loss_cfg: &LossConfig,
    lr: f64,
    step: usize,
    epoch: usize,
) -> Result<TrainLogRecord> {
    let started = Instant::now();
    let mut tape = Tape::new();
    let input = tape.leaf(images.clone(), false);
    let out = state.forward_on(&mut tape, input, true, true)?;

    let sal_vars = salient_loss_on(&mut tape, out.saliency, masks, loss_cfg)?;
    let (total_var, con_vars) = match out.contour {
        Some(con_logits) => {
            let cv = contour_loss_on(&mut tape, con_logits, contours)?;
            (tape.add(sal_vars.total, cv.total)?, Some(cv))
        }
        None => (sal_vars.total, None),
    };

    let tape_total = tape.value(total_var).item().to_f64();
    if !tape_total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {tape_total} at step {step} (epoch {epoch})"
        )));
    }
    tape.backward(total_var)?;

    let mut grads = BTreeMap::new();
    for (path, var) in &out.param_vars {
        if let Some(g) = tape.grad(*var) {
            grads.insert(path.clone(), g);
        }
    }
    adam.step(&mut state.params, &grads, lr)?;

    // The logged total is the coefficient-weighted sum of the logged terms,
    // so the log replays exactly even when the tape runs in single precision.
    let saliency = sal_vars.report(&tape);
    let contour = con_vars.map(|cv| cv.report(&tape));
    let total = saliency.total + contour.as_ref().map(|c| c.total).unwrap_or(0.0);
    Ok(TrainLogRecord {
        step,
        epoch,
        lr,
        total,
        saliency,
        contour,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Full training run over a manifest. The sample set is expanded threefold
/// with horizontal and vertical flips (N entries become 3N virtual
/// samples). `log_line` receives one serialized JSON record per step.
/// Checkpoints are written per epoch; the best epoch by mean training loss
/// is recorded in `best.txt`.
pub fn run_training<S: Scalar>(
    state: &mut NetworkState<S>,
    manifest: &DatasetManifest,
    options: &TrainOptions,
    mut log_line: impl FnMut(&str),
) -> Result<TrainSummary> {
    if options.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    std::fs::create_dir_all(&options.checkpoint_dir)?;
    let resolution = state.config.input_resolution;
    let samples: Vec<Sample<S>> = manifest
        .entries
        .iter()
        .map(|e| data::load_sample(&manifest.root, e, resolution))
        .collect::<Result<_>>()?;
    let virtual_len = data::augmented_len(samples.len());

    let mut adam = Adam::new(options.optimizer);
    let mut step = 0;
    let mut first_sal = None;
    let mut last_sal = 0.0;
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..options.schedule.epochs {
        let lr = options.schedule.lr_at(options.optimizer.lr, epoch);
        let order = data::shuffled_indices(virtual_len, options.seed.wrapping_add(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;

        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<Sample<S>> = chunk
                .iter()
                .map(|&v| data::augmented_sample(&samples[v / 3], v))
                .collect();
            let images: Vec<&Tensor<S>> = batch.iter().map(|s| &s.image).collect();
            let masks: Vec<&Tensor<S>> = batch.iter().map(|s| &s.mask).collect();
            let contours: Vec<&Tensor<S>> = batch.iter().map(|s| &s.contour).collect();
            let record = train_step(
                state,
                &mut adam,
                &stack_batch(&images)?,
                &stack_batch(&masks)?,
                &stack_batch(&contours)?,
                &options.loss,
                lr,
                step,
                epoch,
            )?;
            if first_sal.is_none() {
                first_sal = Some(record.saliency.total);
            }
            last_sal = record.saliency.total;
            epoch_loss += record.total;
            epoch_steps += 1;
            step += 1;
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Format(format!("log record: {e}")))?;
            log_line(&line);
        }

        let ckpt = options.checkpoint_dir.join(format!("epoch{epoch:04}.swck"));
        state.save(&ckpt)?;
        let mean_loss = epoch_loss / epoch_steps.max(1) as f64;
        if best.map(|(_, b)| mean_loss < b).unwrap_or(true) {
            best = Some((epoch, mean_loss));
            std::fs::write(
                options.checkpoint_dir.join("best.txt"),
                format!("epoch{epoch:04}.swck\n"),
            )?;
        }
    }

    let (best_epoch, _) = best.ok_or_else(|| Error::InvalidConfig("no epochs ran".into()))?;
    Ok(TrainSummary {
        steps: step,
        first_saliency_total: first_sal.unwrap_or(0.0),
        last_saliency_total: last_sal,
        best_epoch,
        best_checkpoint: options
            .checkpoint_dir
            .join(format!("epoch{best_epoch:04}.swck")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_drops_once() {
        let s = ScheduleConfig::default();
        assert_eq!(s.lr_at(1e-3, 0), 1e-3);
        assert_eq!(s.lr_at(1e-3, 29), 1e-3);
        assert!((s.lr_at(1e-3, 30) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(1e-3, 40) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // Single "parameter" tensor, loss = sum(x^2); Adam should pull every
        // coordinate toward zero.
        let mut params = BTreeMap::new();
        params.insert(
            "x".to_string(),
            Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
        );
        let mut adam = Adam::new(OptimizerConfig::default());
        for _ in 0..400 {
            let g = params["x"].map(|v| 2.0 * v);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            adam.step(&mut params, &grads, 0.05).unwrap();
        }
        for &v in params["x"].data() {
            assert!(v.abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn stack_batch_concatenates_along_n() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 2.0);
        let s = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[8], 2.0);
    }
}
