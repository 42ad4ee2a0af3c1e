//! AdamW training with warm-up and step decay.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use exa_tensor::{checkpoint, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::decode::{decode_boxes, Prediction};
use super::loss::{detection_loss, LossParts, Targets};
use super::network::{forward, Geometry};
use super::params::Params;
use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Share of all steps spent warming up linearly.
    pub warmup_fraction: f64,
    /// Step from which the rate drops tenfold; `None` picks 80% of all steps.
    pub decay_step: Option<usize>,
    /// Write a CSV row every this many steps.
    pub log_every: usize,
    /// Stop after this many steps; the schedule still spans all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_fraction: 0.2,
            decay_step: None,
            log_every: 10,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }

    /// Learning rate of 0-based step `step`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        let mut lr = self.lr;
        if step < warmup {
            lr *= (step + 1) as f64 / warmup as f64;
        }
        let decay = self.decay_step.unwrap_or((0.8 * total as f64).round() as usize);
        if step >= decay {
            lr *= 0.1;
        }
        lr
    }
}

/// Parameters plus optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: usize,
}

const STEP_RECORD: &str = "optim.step";

impl TrainState {
    pub fn new(params: Params) -> Self {
        let zeros: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn records(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.params.records();
        for (name, t) in self.params.names().iter().zip(&self.m) {
            out.push((format!("optim.m.{name}"), t.clone()));
        }
        for (name, t) in self.params.names().iter().zip(&self.v) {
            out.push((format!("optim.v.{name}"), t.clone()));
        }
        // split so every count up to 2^48 stays exact in f32
        let (hi, lo) = (self.step >> 24, self.step & 0xff_ffff);
        out.push((STEP_RECORD.into(), Tensor::from_f64([2usize], &[hi as f64, lo as f64]).expect("two values")));
        out
    }

    /// Restores a training state; a plain parameter checkpoint yields
    /// fresh moments at step 0.
    pub fn from_records(cfg: &ModelConfig, records: &[(String, Tensor<f32>)]) -> Result<Self> {
        let params = Params::from_records(cfg, records)?;
        let mut state = TrainState::new(params);
        let find = |n: &str| records.iter().find(|(name, _)| name == n).map(|(_, t)| t);
        let Some(step) = find(STEP_RECORD) else { return Ok(state) };
        let d = step.data();
        if d.len() != 2 {
            return Err(Error::Config("optimizer step record must hold two values".into()));
        }
        state.step = ((d[0] as usize) << 24) + d[1] as usize;
        for (i, name) in state.params.names().to_vec().iter().enumerate() {
            for (prefix, slot) in [("optim.m", &mut state.m), ("optim.v", &mut state.v)] {
                let t = find(&format!("{prefix}.{name}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {prefix}.{name}")))?;
                if t.shape() != slot[i].shape() {
                    return Err(Error::Config(format!("{prefix}.{name} has shape {:?}", t.shape())));
                }
                slot[i] = t.clone();
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.records())?;
        Ok(())
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        Self::from_records(cfg, &checkpoint::read(path)?)
    }

    /// One AdamW update with the given summed gradients.
    pub fn apply(&mut self, tcfg: &TrainConfig, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - tcfg.beta1.powi(t);
        let bc2 = 1.0 - tcfg.beta2.powi(t);
        let (b1, b2) = (tcfg.beta1 as f32, tcfg.beta2 as f32);
        let decay = tcfg.weight_decay as f32;
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = tcfg.eps as f32;
        let lr = lr as f32;
        for (i, p) in self.params.tensors_mut().iter_mut().enumerate() {
            let decayed = p.rank() >= 2;
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                if decayed {
                    *w -= lr * decay * *w;
                }
                *w -= update;
            }
        }
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    cfg: &ModelConfig,
    geo: &Geometry,
    params: &Params,
    image: &[f32],
    targets: &Targets,
) -> Result<(LossParts, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let bound = params.load(&mut tape, true);
    let fwd = forward(&mut tape, &bound, cfg, geo, image)?;
    let (loss, parts) = detection_loss(&mut tape, cfg, geo, &fwd, targets)?;
    tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((parts, grads))
}

pub fn predict(cfg: &ModelConfig, geo: &Geometry, params: &Params, image: &[f32]) -> Result<Prediction> {
    let mut tape = Tape::<f32>::new();
    let bound = params.load(&mut tape, false);
    let fwd = forward(&mut tape, &bound, cfg, geo, image)?;
    Ok(decode_boxes(
        cfg,
        geo,
        tape.value(fwd.in_head).data(),
        tape.value(fwd.out_head).data(),
        &fwd.active,
    ))
}

/// Predictions for many images, computed in parallel and returned in order.
pub fn predict_all(cfg: &ModelConfig, params: &Params, images: &[Vec<f32>]) -> Result<Vec<Prediction>> {
    let geo = Geometry::new(cfg)?;
    images.par_iter().map(|im| predict(cfg, &geo, params, im)).collect()
}

/// Visit order of epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub const LOG_HEADER: &str = "step,epoch,loss,heatmap,offset,size,score,lr,wall_ms";

/// Called after every epoch with the epoch index and current state.
pub type EpochHook<'a> = dyn FnMut(usize, &TrainState) -> Result<()> + 'a;

/// Trains from `state` until `tcfg.epochs` epochs are complete. The
/// shuffle depends only on `(seed, epoch)` and gradients are summed in
/// sample order, so results do not depend on the thread count and a
/// resumed run continues exactly.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    samples: &[Sample],
    seed: u64,
    mut state: TrainState,
    log: &mut dyn Write,
    hook: &mut EpochHook<'_>,
) -> Result<TrainState> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let geo = Geometry::new(cfg)?;
    let images: Vec<Vec<f32>> = samples.par_iter().map(|s| s.image.to_chw()).collect();
    let targets: Vec<Targets> = samples
        .par_iter()
        .map(|s| Targets::build(cfg, &geo, &s.meta))
        .collect::<Result<_>>()?;
    let per_epoch = tcfg.steps_per_epoch(samples.len());
    let total = tcfg.total_steps(samples.len());
    let stop = tcfg.max_steps.map_or(total, |m| m.min(total));
    let start = Instant::now();
    if state.step == 0 {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io("training log", e))?;
    }
    while state.step < stop {
        let epoch = state.step / per_epoch;
        let order = epoch_order(seed, epoch, samples.len());
        for batch in order.chunks(tcfg.batch_size).skip(state.step % per_epoch) {
            if state.step >= stop {
                break;
            }
            let results: Vec<(LossParts, Vec<Vec<f32>>)> = batch
                .par_iter()
                .map(|&i| sample_gradients(cfg, &geo, &state.params, &images[i], &targets[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            let mut grads: Vec<Vec<f32>> = state.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut parts = LossParts::default();
            for (p, g) in &results {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(gi) {
                        *a += v * scale;
                    }
                }
                parts.total += p.total / batch.len() as f64;
                parts.heatmap += p.heatmap / batch.len() as f64;
                parts.offset += p.offset / batch.len() as f64;
                parts.size += p.size / batch.len() as f64;
                parts.score += p.score / batch.len() as f64;
            }
            if !parts.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step: state.step,
                    detail: format!("loss {} with heatmap {} offset {} size {} score {}", parts.total, parts.heatmap, parts.offset, parts.size, parts.score),
                });
            }
            let lr = tcfg.lr_at(state.step, total);
            state.apply(tcfg, &grads, lr);
            if state.step % tcfg.log_every.max(1) == 0 || state.step == stop {
                writeln!(
                    log,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3e},{}",
                    state.step,
                    epoch,
                    parts.total,
                    parts.heatmap,
                    parts.offset,
                    parts.size,
                    parts.score,
                    lr,
                    start.elapsed().as_millis()
                )
                .map_err(|e| Error::io("training log", e))?;
                log::debug!("step {} loss {:.4}", state.step, parts.total);
            }
        }
        if state.step % per_epoch == 0 {
            hook(epoch, &state)?;
        }
    }
    Ok(state)
}
