//! Ablation sweeps over a grid of named variants.
//!
//! A grid file holds `[name]` sections; each section's `key=value` lines
//! override the base run configuration for that variant:
//!
//! ```text
//! [baseline]
//! svc=false
//! attention=none
//! adff=false
//!
//! [full]
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use dcganet::config::{join, KvMap};
use dcganet::data::Sample;
use dcganet::metrics::MetricsReport;
use dcganet::run::RunConfig;
use dcganet::training::{fit, FitOptions, Precision, Trainer};
use dcganet::Scalar;

use super::{load_data, read_text, write_file, Fail, Result};

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for the reported metrics (defaults to --data).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    grid: PathBuf,
    /// Base run configuration shared by all variants.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds shared by every variant, comma-separated (defaults to the
    /// configuration's seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory for ablation.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: String,
}

pub fn parse_grid(text: &str) -> Result<Vec<Variant>> {
    let mut variants: Vec<Variant> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(Fail::usage(format!("grid line {}: empty variant name", i + 1)));
            }
            if !seen.insert(name.clone()) {
                return Err(Fail::usage(format!("grid line {}: duplicate variant name {name:?}", i + 1)));
            }
            variants.push(Variant {
                name,
                overrides: String::new(),
            });
            continue;
        }
        let Some(v) = variants.last_mut() else {
            return Err(Fail::usage(format!("grid line {}: setting outside a [variant] section", i + 1)));
        };
        v.overrides.push_str(line);
        v.overrides.push('\n');
    }
    if variants.is_empty() {
        return Err(Fail::usage("grid lists no variants"));
    }
    Ok(variants)
}

/// Base configuration with a variant's keys replaced.
pub fn apply(base: &RunConfig, overrides: &str) -> Result<RunConfig> {
    let keys: BTreeSet<String> = KvMap::parse(overrides)?
        .keys()
        .map(str::to_string)
        .collect();
    let mut text: String = base
        .to_text()
        .lines()
        .filter(|l| l.split_once('=').is_none_or(|(k, _)| !keys.contains(k.trim())))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(overrides);
    Ok(RunConfig::parse(&text)?)
}

struct Row {
    name: String,
    params: usize,
    reports: Vec<MetricsReport>,
}

fn run_variant<T: Scalar>(config: &RunConfig, train: &[Sample], val: &[Sample]) -> Result<(usize, MetricsReport)> {
    let mut trainer = Trainer::<T>::new(config.net.clone(), config.train.clone())?;
    fit(&mut trainer, train, &[], FitOptions::new(config.to_text()))?;
    let report = trainer.evaluate(val, 0.5, false)?;
    Ok((trainer.params.numel(), report))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let variants = parse_grid(&read_text(&a.grid)?)?;
    let mut base = match &a.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    let seeds = if a.seeds.is_empty() { vec![base.train.seed] } else { a.seeds.clone() };
    let configs = variants
        .iter()
        .map(|v| apply(&base, &v.overrides).map_err(|f| Fail::usage(format!("variant {}: {}", v.name, f.message_text()))))
        .collect::<Result<Vec<_>>>()?;
    let train = load_data(&a.data)?;
    let val = match &a.val {
        Some(v) => load_data(v)?,
        None => train.clone(),
    };
    if train.is_empty() || val.is_empty() {
        return Err(Fail::usage("ablation needs non-empty training and evaluation sets"));
    }
    let mut csv = String::from("variant,seed,params,iou,niou,pd,fa\n");
    let mut rows = Vec::new();
    for (v, config) in variants.iter().zip(&configs) {
        let mut row = Row {
            name: v.name.clone(),
            params: 0,
            reports: Vec::new(),
        };
        for &seed in &seeds {
            let mut c = config.clone();
            c.train.seed = seed;
            let (params, r) = match c.train.precision {
                Precision::F32 => run_variant::<f32>(&c, &train, &val)?,
                Precision::F64 => run_variant::<f64>(&c, &train, &val)?,
            };
            eprintln!("{}\tseed {seed}\tIoU {:.4}", v.name, r.iou);
            let _ = writeln!(csv, "{},{seed},{params},{},{},{},{}", v.name, r.iou, r.niou, r.pd, r.fa);
            row.params = params;
            row.reports.push(r);
        }
        rows.push(row);
    }
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(7).max(7);
    println!("seeds: {}", join(&seeds));
    println!("{:<width$}  {:>9}  {:>7}  {:>7}  {:>7}  {:>10}", "variant", "params", "IoU", "nIoU", "Pd", "Fa(x1e-6)");
    for r in &rows {
        println!(
            "{:<width$}  {:>9}  {:>7.4}  {:>7.4}  {:>7.4}  {:>10.2}",
            r.name,
            r.params,
            mean(r.reports.iter().map(|m| m.iou)),
            mean(r.reports.iter().map(|m| m.niou)),
            mean(r.reports.iter().map(|m| m.pd)),
            mean(r.reports.iter().map(|m| m.fa * 1e6)),
        );
    }
    write_file(&a.out.join("ablation.csv"), csv)
}
