//! The epoch loop: seeded shuffling and augmentation, per-sample tapes run
//! in parallel, gradients summed in sample order, deep supervision, AdamW.

use std::time::Instant;

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::config::{join, ConfigError, KvMap};
use crate::data::{augment, Sample};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{Ctx, DcgaNet, ModelError, NetConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor4};

use super::{adamw_step, clip_grad_norm, poly_lr, AdamWState, TrainError, DEFAULT_SMOOTH};

/// Arithmetic width used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Loss weight of the main head followed by the auxiliary heads, coarsest
    /// first. The last entry repeats for any remaining auxiliary heads.
    pub ds_weights: Vec<f64>,
    pub seed: u64,
    pub augment: bool,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write `last.ckpt` every this many epochs.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            base_lr: 1e-4,
            batch_size: 4,
            poly_power: 0.9,
            weight_decay: 1e-2,
            ds_weights: vec![1.0, 0.5],
            seed: 0,
            augment: true,
            clip_norm: None,
            checkpoint_every: 10,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "0".into(), "must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("lr", self.base_lr.to_string(), "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into(), "must be at least 1");
        }
        if self.poly_power.is_nan() || self.poly_power < 0.0 {
            return bad("poly_power", self.poly_power.to_string(), "must be non-negative");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", self.weight_decay.to_string(), "must be non-negative");
        }
        let ws = &self.ds_weights;
        if ws.is_empty() || ws.iter().any(|w| w.is_nan() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return bad("ds_weights", join(ws), "must be non-negative with a positive sum");
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad("clip_norm", c.to_string(), "must be positive (0 disables)");
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "0".into(), "must be at least 1");
        }
        Ok(())
    }

    /// Weight for head `i` (0 = main).
    pub fn head_weight(&self, i: usize) -> f64 {
        self.ds_weights[i.min(self.ds_weights.len() - 1)]
    }

    pub fn take_from(kv: &mut KvMap) -> Result<Self, ConfigError> {
        let d = TrainConfig::default();
        let precision = match kv.take::<u32>("precision")? {
            None => d.precision,
            Some(32) => Precision::F32,
            Some(64) => Precision::F64,
            Some(v) => {
                return Err(ConfigError::Value {
                    key: "precision".into(),
                    value: v.to_string(),
                    reason: "expected 32 or 64".into(),
                })
            }
        };
        let clip: f64 = kv.take_or("clip_norm", 0.0)?;
        let config = TrainConfig {
            epochs: kv.take_or("epochs", d.epochs)?,
            base_lr: kv.take_or("lr", d.base_lr)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            poly_power: kv.take_or("poly_power", d.poly_power)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            ds_weights: kv.take_list("ds_weights")?.unwrap_or(d.ds_weights),
            seed: kv.take_or("seed", d.seed)?,
            augment: kv.take_or("augment", d.augment)?,
            clip_norm: (clip != 0.0).then_some(clip),
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            precision,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        format!(
            "epochs={}\nlr={}\nbatch_size={}\npoly_power={}\nweight_decay={}\nds_weights={}\nseed={}\naugment={}\nclip_norm={}\ncheckpoint_every={}\nprecision={}\n",
            self.epochs,
            self.base_lr,
            self.batch_size,
            self.poly_power,
            self.weight_decay,
            join(&self.ds_weights),
            self.seed,
            self.augment,
            self.clip_norm.unwrap_or(0.0),
            self.checkpoint_every,
            self.precision.bits(),
        )
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Zero-based epoch index; the learning rate is `poly_lr` at this index.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

impl EpochReport {
    /// Tab-separated log line; epochs are numbered from 1.
    pub fn log_line(&self) -> String {
        format!("{}\t{:e}\t{:.6}\t{:.2}", self.epoch + 1, self.lr, self.mean_loss, self.seconds)
    }
}

/// Network, parameters and optimizer state for one run.
pub struct Trainer<T: Scalar> {
    pub net: DcgaNet,
    pub params: ParamStore<T>,
    pub state: AdamWState<T>,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
}

/// Treats subnormal floats as zero on the current thread until dropped.
/// Saturated sigmoids otherwise fill the backward pass with subnormals,
/// which are an order of magnitude slower on x86.
struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[allow(deprecated)]
    fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the flush-to-zero (bit 15) and denormals-are-zero
            // (bit 6) flags change; SSE is baseline on x86_64.
            unsafe {
                let saved = _mm_getcsr();
                _mm_setcsr(saved | 0x8040);
                FlushSubnormals { saved }
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushSubnormals {}
    }
}

impl Drop for FlushSubnormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// Loss and parameter gradients of one sample.
struct SampleGrad<T> {
    loss: f64,
    grads: Vec<(ParamId, Tensor4<T>)>,
}

fn sample_step<T: Scalar>(
    net: &DcgaNet,
    params: &ParamStore<T>,
    config: &TrainConfig,
    sample: &Sample,
) -> Result<SampleGrad<T>, TrainError> {
    let _flush = FlushSubnormals::enable();
    let mut tape = Tape::new();
    let image = tape.constant(sample.image_tensor());
    let target = sample.mask_tensor::<T>();
    let mut ctx = Ctx::new(&mut tape, params);
    let out = net.forward(&mut ctx, image)?;
    let smooth = T::lit(DEFAULT_SMOOTH);
    let mut total = None;
    for (i, &logits) in std::iter::once(&out.logits).chain(&out.aux).enumerate() {
        let w = config.head_weight(i);
        if w == 0.0 {
            continue;
        }
        let p = tape.sigmoid(logits);
        let l = tape.soft_iou_loss(p, &target, smooth)?;
        let l = tape.scale(l, T::lit(w));
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("validated weights have a positive entry");
    let loss = tape.value(total).data()[0].as_f64();
    if !loss.is_finite() {
        return Ok(SampleGrad { loss, grads: Vec::new() });
    }
    let grads = tape.backward(total)?.into_params();
    Ok(SampleGrad { loss, grads })
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(net: NetConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (net, params) = DcgaNet::init::<T>(net, config.seed)?;
        let state = AdamWState::new(&params, config.weight_decay);
        Ok(Trainer {
            net,
            params,
            state,
            config,
            epoch: 0,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        poly_lr(self.config.base_lr, epoch, self.config.epochs, self.config.poly_power)
    }

    /// Sample order and per-sample augmentation seeds for `epoch`.
    fn epoch_plan(&self, epoch: usize, len: usize) -> (Vec<usize>, Vec<u64>) {
        let mut rng = Stream::new(self.config.seed, 1 + epoch as u64);
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        let seeds = order.iter().map(|_| rng.next_u64()).collect();
        (order, seeds)
    }

    /// Train one epoch over `data` and advance the epoch counter.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochReport, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = self.lr_at(epoch);
        let (order, seeds) = self.epoch_plan(epoch, data.len());
        let mut loss_sum = 0.0;
        let positions: Vec<usize> = (0..order.len()).collect();
        for (batch_no, batch) in positions.chunks(self.config.batch_size).enumerate() {
            let (net, params, config) = (&self.net, &self.params, &self.config);
            let results: Vec<Result<SampleGrad<T>, TrainError>> = batch
                .par_iter()
                .map(|&pos| {
                    let sample = &data[order[pos]];
                    if config.augment {
                        sample_step(net, params, config, &augment(sample, seeds[pos]))
                    } else {
                        sample_step(net, params, config, sample)
                    }
                })
                .collect();
            let mut summed: Vec<Option<Tensor4<T>>> = vec![None; self.params.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(self.non_finite(data, &order, batch, epoch, batch_no));
                }
                batch_loss += r.loss;
                for (id, g) in r.grads {
                    match &mut summed[id.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            loss_sum += batch_loss;
            let inv = T::lit(1.0 / batch.len() as f64);
            let mut grads: Vec<(ParamId, Tensor4<T>)> = summed
                .into_iter()
                .enumerate()
                .filter_map(|(i, g)| {
                    g.map(|mut g| {
                        g.scale(inv);
                        (ParamId(i), g)
                    })
                })
                .collect();
            if let Some(max) = self.config.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            adamw_step(&mut self.params, &grads, &mut self.state, lr).map_err(|e| match e {
                TrainError::NonFiniteGradient(name) => TrainError::NonFinite {
                    epoch: epoch + 1,
                    batch: batch_no + 1,
                    ids: batch.iter().map(|&p| data[order[p]].id.clone()).collect(),
                    what: format!("gradient of {name}"),
                },
                other => other,
            })?;
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch,
            lr,
            mean_loss: loss_sum / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn non_finite(&self, data: &[Sample], order: &[usize], batch: &[usize], epoch: usize, batch_no: usize) -> TrainError {
        TrainError::NonFinite {
            epoch: epoch + 1,
            batch: batch_no + 1,
            ids: batch.iter().map(|&p| data[order[p]].id.clone()).collect(),
            what: "loss".into(),
        }
    }

    pub fn evaluate(&self, data: &[Sample], threshold: f64, target_level: bool) -> Result<MetricsReport, TrainError> {
        evaluate_net(&self.net, &self.params, data, threshold, target_level)
    }
}

/// Sigmoid probabilities of the main head for one sample.
pub fn predict_probs<T: Scalar>(net: &DcgaNet, params: &ParamStore<T>, sample: &Sample) -> Result<Vec<f64>, ModelError> {
    let pred = net.predict(params, &sample.image_tensor::<T>())?;
    Ok(pred
        .logits
        .data()
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z.as_f64()).exp()))
        .collect())
}

/// Metrics of `net` on `data`; forward passes run in parallel.
pub fn evaluate_net<T: Scalar>(
    net: &DcgaNet,
    params: &ParamStore<T>,
    data: &[Sample],
    threshold: f64,
    target_level: bool,
) -> Result<MetricsReport, TrainError> {
    let probs: Vec<Vec<f64>> = data
        .par_iter()
        .map(|s| predict_probs(net, params, s))
        .collect::<Result<_, _>>()?;
    let maps: Vec<(&[f64], &[u8], usize, usize)> = probs
        .iter()
        .zip(data)
        .map(|(p, s)| (p.as_slice(), s.mask.as_slice(), s.height, s.width))
        .collect();
    Ok(evaluate(&maps, threshold, target_level)?)
}
