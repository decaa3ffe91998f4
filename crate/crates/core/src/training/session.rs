//! Multi-epoch driver: validation, logs, periodic and best checkpoints, and
//! resumption.
//!
//! Files written to the output directory:
//!
//! * `train.log`: `epoch, lr, mean_loss, seconds`, tab-separated
//! * `val.log`: `epoch, iou, niou, pd, fa`, tab-separated
//! * `last.ckpt` + `optim.ckpt`: parameters and optimizer moments, every
//!   `checkpoint_every` epochs and after the final epoch
//! * `best.ckpt`: parameters at the best validation IoU so far

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KvMap;
use crate::data::Sample;
use crate::metrics::MetricsReport;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor4};

use super::{EpochReport, TrainError, Trainer};

/// Threshold used for validation during training.
pub const VAL_THRESHOLD: f64 = 0.5;

/// Called after every epoch with its report and the validation metrics.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochReport, Option<&MetricsReport>);

pub struct FitOptions<'a> {
    pub out_dir: Option<PathBuf>,
    /// Text stored in every checkpoint; must include the network config keys.
    pub meta: String,
    /// Continue from `last.ckpt` / `optim.ckpt` in `out_dir`.
    pub resume: bool,
    /// Stop once this many epochs have completed (defaults to all).
    pub stop_after: Option<usize>,
    pub on_epoch: Option<EpochHook<'a>>,
}

impl FitOptions<'_> {
    pub fn new(meta: String) -> Self {
        FitOptions {
            out_dir: None,
            meta,
            resume: false,
            stop_after: None,
            on_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub log: String,
    pub val_log: String,
    pub best_iou: Option<f64>,
    /// One-based epoch of the best validation IoU.
    pub best_epoch: Option<usize>,
    pub last_val: Option<MetricsReport>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(io(path))
}

fn save<T: Scalar>(store: &ParamStore<T>, meta: &str, path: &Path) -> Result<(), TrainError> {
    store.save(meta, path).map_err(io(path))
}

fn val_line(epoch: usize, r: &MetricsReport) -> String {
    format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}", epoch + 1, r.iou, r.niou, r.pd, r.fa * 1e6)
}

fn first_lines(text: &str, n: usize) -> String {
    text.lines().take(n).map(|l| format!("{l}\n")).collect()
}

struct Best {
    iou: Option<f64>,
    epoch: Option<usize>,
}

fn optimizer_store<T: Scalar>(trainer: &Trainer<T>) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (kind, moments) in [("m", &trainer.state.m), ("v", &trainer.state.v)] {
        for ((_, p), t) in trainer.params.iter().zip(moments) {
            store.add(format!("{kind}.{}", p.name), t.clone());
        }
    }
    store
}

fn save_resume_state<T: Scalar>(trainer: &Trainer<T>, best: &Best, meta: &str, dir: &Path) -> Result<(), TrainError> {
    save(&trainer.params, meta, &dir.join("last.ckpt"))?;
    let mut state_meta = format!("epoch={}\nstep={}\n", trainer.epoch, trainer.state.step);
    if let (Some(iou), Some(epoch)) = (best.iou, best.epoch) {
        state_meta.push_str(&format!("best_iou={iou}\nbest_epoch={epoch}\n"));
    }
    save(&optimizer_store(trainer), &state_meta, &dir.join("optim.ckpt"))
}

fn load_resume_state<T: Scalar>(trainer: &mut Trainer<T>, dir: &Path) -> Result<Best, TrainError> {
    let resume = |e: String| TrainError::Resume(e);
    let last = dir.join("last.ckpt");
    let (_, stored) = ParamStore::<T>::load(&last).map_err(|e| resume(format!("{}: {e}", last.display())))?;
    trainer
        .params
        .assign_from(&stored)
        .map_err(|e| resume(format!("{}: {e}", last.display())))?;
    let optim = dir.join("optim.ckpt");
    let (meta, moments) = ParamStore::<T>::load(&optim).map_err(|e| resume(format!("{}: {e}", optim.display())))?;
    let n = trainer.params.len();
    if moments.len() != 2 * n {
        return Err(resume(format!("{} holds {} moments, expected {}", optim.display(), moments.len(), 2 * n)));
    }
    let all: Vec<Tensor4<T>> = moments.iter().map(|(_, p)| p.value.clone()).collect();
    for (i, (_, p)) in trainer.params.iter().enumerate() {
        if all[i].shape() != p.value.shape() || all[n + i].shape() != p.value.shape() {
            return Err(resume(format!("moment shapes in {} do not match", optim.display())));
        }
    }
    trainer.state.m = all[..n].to_vec();
    trainer.state.v = all[n..].to_vec();
    let mut kv = KvMap::parse(&meta)?;
    trainer.epoch = kv.take("epoch")?.ok_or_else(|| resume("optimizer state lacks epoch".into()))?;
    trainer.state.step = kv.take("step")?.ok_or_else(|| resume("optimizer state lacks step".into()))?;
    let best = Best {
        iou: kv.take("best_iou")?,
        epoch: kv.take("best_epoch")?,
    };
    kv.finish()?;
    Ok(best)
}

/// Train until `config.epochs` (or `stop_after`) epochs have completed,
/// validating on `val` after each epoch when it is non-empty.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &[Sample],
    val: &[Sample],
    mut opts: FitOptions<'_>,
) -> Result<FitSummary, TrainError> {
    let dir = opts.out_dir.clone();
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(io(d))?;
    }
    let mut log = String::new();
    let mut val_log = String::new();
    let mut best = Best { iou: None, epoch: None };
    if opts.resume {
        let d = dir
            .as_deref()
            .ok_or_else(|| TrainError::Resume("no output directory to resume from".into()))?;
        best = load_resume_state(trainer, d)?;
        let read = |name: &str| fs::read_to_string(d.join(name)).unwrap_or_default();
        log = first_lines(&read("train.log"), trainer.epoch);
        val_log = first_lines(&read("val.log"), if val.is_empty() { 0 } else { trainer.epoch });
    }
    let end = opts.stop_after.unwrap_or(trainer.config.epochs).min(trainer.config.epochs);
    let mut last_val = None;
    while trainer.epoch < end {
        let report = trainer.train_epoch(train)?;
        log.push_str(&report.log_line());
        log.push('\n');
        let val_report = if val.is_empty() {
            None
        } else {
            let r = trainer.evaluate(val, VAL_THRESHOLD, false)?;
            val_log.push_str(&val_line(report.epoch, &r));
            val_log.push('\n');
            if best.iou.is_none_or(|b| r.iou > b) {
                best = Best {
                    iou: Some(r.iou),
                    epoch: Some(report.epoch + 1),
                };
                if let Some(d) = &dir {
                    save(&trainer.params, &opts.meta, &d.join("best.ckpt"))?;
                }
            }
            Some(r)
        };
        if let Some(d) = &dir {
            write(&d.join("train.log"), &log)?;
            if !val.is_empty() {
                write(&d.join("val.log"), &val_log)?;
            }
            if trainer.epoch.is_multiple_of(trainer.config.checkpoint_every) || trainer.epoch == end {
                save_resume_state(trainer, &best, &opts.meta, d)?;
            }
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&report, val_report.as_ref());
        }
        last_val = val_report;
    }
    Ok(FitSummary {
        log,
        val_log,
        best_iou: best.iou,
        best_epoch: best.epoch,
        last_val,
    })
}
