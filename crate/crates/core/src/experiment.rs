//! Synthetic data, SGD with curvature probes, and width sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{estimate_curvature, matrix_free_projections, CurvatureRecord};
use crate::diff::{batch_loss, loss_and_gradient};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{Batch, Loss};
use crate::network::{add_scaled_weights, init_network, Activation, Architecture, InitScheme, Network};
use crate::rng::RngStream;
use crate::theory::random_unit;

const SHUFFLE_PURPOSE: u64 = 0x5348_5546;

/// Unit-norm Gaussian inputs with uniform `±1` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub batch: Batch,
    pub seed: u64,
}

impl Dataset {
    /// Draws from stream `(seed, n_0)`, so each input dimension gets its own
    /// inputs and labels under one seed.
    pub fn generate(n_samples: usize, n0: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 || n0 == 0 {
            return Err(Error::Dimension(format!("{n_samples} samples of dimension {n0}")));
        }
        let mut rng = RngStream::new(seed, n0 as u64).rng();
        let mut data = Vec::with_capacity(n_samples * n0);
        let mut targets = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            data.extend(random_unit(n0, &mut rng));
            targets.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
        Ok(Self {
            batch: Batch::new(Matrix::from_vec(n_samples, n0, data)?, targets)?,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.batch.inputs().cols()
    }

    /// Text format: a header, then one `target x_1 ... x_n` line per sample.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("curvkit-dataset v1\nseed {}\nshape {} {}\n", self.seed, self.len(), self.dim());
        for s in 0..self.len() {
            write!(out, "{:?}", self.batch.targets()[s]).unwrap();
            for v in self.batch.input(s) {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some("curvkit-dataset v1") {
            return Err(err("missing header".into()));
        }
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad seed line".into()))?;
        let shape: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("shape "))
            .map(|s| s.split_whitespace().filter_map(|t| t.parse().ok()).collect())
            .ok_or_else(|| err("bad shape line".into()))?;
        let [n, d] = shape[..] else {
            return Err(err("bad shape line".into()));
        };
        let mut data = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n);
        for (i, line) in lines.enumerate().take(n) {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(format!("sample {i}: {e}")))?;
            if vals.len() != d + 1 {
                return Err(err(format!("sample {i} has {} values", vals.len())));
            }
            targets.push(vals[0]);
            data.extend_from_slice(&vals[1..]);
        }
        if targets.len() != n {
            return Err(err(format!("expected {n} samples, found {}", targets.len())));
        }
        Ok(Self {
            batch: Batch::new(Matrix::from_vec(n, d, data)?, targets)?,
            seed,
        })
    }
}

pub fn generate_dataset(n_samples: usize, n0: usize, seed: u64) -> Result<Dataset> {
    Dataset::generate(n_samples, n0, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub init: InitKindGain,
    pub loss: Loss,
    pub lr: f64,
    pub halve_at: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps between exact probes; `None` probes the first step of every
    /// epoch.
    pub probe_every: Option<usize>,
    pub data_seed: u64,
    pub init_seed: u64,
}

/// Serializable form of [`InitScheme`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitKindGain {
    pub kind: crate::rng::InitKind,
    pub gain: f64,
}

impl From<InitKindGain> for InitScheme {
    fn from(v: InitKindGain) -> Self {
        InitScheme {
            kind: v.kind,
            gain: v.gain,
        }
    }
}

impl TrainConfig {
    /// Toy defaults: 8 weight layers of width `n`, rectifier, L2 loss,
    /// `δ_0 = 0.01` halved at epochs 40/80/120, batch 100, 100 epochs.
    /// Rectified networks start from variance `2/fan_in`.
    pub fn toy(n: usize, activation: Activation) -> Result<Self> {
        Ok(Self {
            arch: Architecture::constant_width(n, 8, activation)?,
            init: default_init(activation),
            loss: Loss::l2(),
            lr: 0.01,
            halve_at: vec![40, 80, 120],
            batch_size: 100,
            epochs: 100,
            probe_every: None,
            data_seed: 0,
            init_seed: 0,
        })
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.batch_size > n_samples {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={n_samples}",
                self.batch_size
            )));
        }
        if self.probe_every == Some(0) {
            return Err(Error::Config("probe_every must be at least 1".into()));
        }
        self.loss.validate()?;
        self.arch.require_single_output()
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.lr, &self.halve_at, epoch)
    }
}

/// Gain 2 for rectifiers, 1 otherwise.
pub fn default_init(activation: Activation) -> InitKindGain {
    InitKindGain {
        kind: crate::rng::InitKind::Gaussian,
        gain: match activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        },
    }
}

/// `δ_0·2^(−#{h ∈ halve_at : h ≤ epoch})` with 0-based epochs.
pub fn lr_at_epoch(lr0: f64, halve_at: &[usize], epoch: usize) -> f64 {
    let halvings = halve_at.iter().filter(|&&h| h <= epoch).count();
    lr0 * 0.5f64.powi(halvings as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<CurvatureRecord>,
    /// Mean minibatch loss over each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub config: Option<TrainConfig>,
    pub wall_time_secs: f64,
}

impl RunLog {
    pub fn probed(&self) -> impl Iterator<Item = &CurvatureRecord> {
        self.records.iter().filter(|r| r.hess_proj.is_some())
    }

    /// Fraction of probed steps with `𝓗_ĝ ≥ 0`.
    pub fn positivity_fraction(&self) -> Option<f64> {
        let (pos, n) = self
            .probed()
            .fold((0usize, 0usize), |(p, n), r| (p + (r.hess_proj.unwrap() >= 0.0) as usize, n + 1));
        (n > 0).then(|| pos as f64 / n as f64)
    }

    /// Median over probed steps of `|𝓗_ĝ − G_ĝ| / max(|𝓗_ĝ|, 1e-8)`.
    pub fn median_functional_share(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .probed()
            .map(|r| {
                let (h, g) = (r.hess_proj.unwrap(), r.g_proj.unwrap());
                (h - g).abs() / h.abs().max(1e-8)
            })
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }
}

/// Vanilla SGD on sequential minibatches of a per-epoch shuffle.
///
/// Each step records the loss and `‖g‖²` before the update and the
/// estimator from the loss re-measured on the same minibatch after it.
/// Probed steps also record the three projections along `ĝ`. Aborts with
/// [`Error::Diverged`] (carrying the records so far) once the loss is
/// non-finite or exceeds `1e6` times the first step's loss.
pub fn sgd_train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<RunLog> {
    if data.dim() != net.arch().input_dim() {
        return Err(Error::Dimension(format!(
            "dataset dimension {} for n_0 = {}",
            data.dim(),
            net.arch().input_dim()
        )));
    }
    cfg.validate(data.len())?;
    let started = Instant::now();
    let n = data.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let probe_every = cfg.probe_every.unwrap_or(per_epoch);
    let shuffle = RngStream::new(cfg.data_seed, 0).derive(SHUFFLE_PURPOSE);
    let idx = net.arch().param_index();
    let mut log = RunLog {
        records: Vec::with_capacity(cfg.epochs * per_epoch),
        epoch_losses: Vec::with_capacity(cfg.epochs),
        config: Some(cfg.clone()),
        wall_time_secs: 0.0,
    };
    let mut initial_loss = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut RngStream::new(shuffle.master_seed, epoch as u64).rng());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch.select(chunk)?;
            let (loss_t, grads) = loss_and_gradient(net, &batch, &cfg.loss)?;
            let first = *initial_loss.get_or_insert(loss_t);
            if !loss_t.is_finite() || loss_t > 1e6 * first.max(f64::MIN_POSITIVE) {
                log.wall_time_secs = started.elapsed().as_secs_f64();
                return Err(Error::Diverged {
                    step,
                    loss: loss_t,
                    partial: Box::new(log),
                });
            }
            let g = idx.flatten(&grads);
            let grad_norm_sq = crate::linalg::norm_sq(&g);
            let mut record = CurvatureRecord {
                step,
                epoch,
                lr,
                loss: loss_t,
                grad_norm_sq,
                curv_estimate: None,
                curv_exact_half: None,
                g_proj: None,
                h_proj: None,
                hess_proj: None,
            };
            if step % probe_every == 0 && grad_norm_sq > 0.0 {
                let p = matrix_free_projections(net, &batch, &cfg.loss, &g)?;
                record.hess_proj = Some(p.hessian);
                record.g_proj = Some(p.ggn);
                record.h_proj = Some(p.functional);
                record.curv_exact_half = Some(0.5 * grad_norm_sq * p.hessian);
            }
            add_scaled_weights(net, -lr, &grads);
            if lr > 0.0 {
                let loss_t1 = batch_loss(net, &batch, &cfg.loss)?;
                record.curv_estimate = Some(estimate_curvature(loss_t, loss_t1, grad_norm_sq, lr)?);
            }
            epoch_loss += loss_t;
            log.records.push(record);
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / per_epoch as f64);
    }
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Initializes from stream `(init_seed, seed_index)`.
pub fn init_for_run(arch: &Architecture, cfg: &TrainConfig, seed_index: u64) -> Result<Network> {
    init_network(arch, cfg.init.into(), &mut RngStream::new(cfg.init_seed, seed_index).rng())
}

/// Dataset and network for a single training run of `cfg`.
pub fn prepare_run(cfg: &TrainConfig, n_samples: usize) -> Result<(Network, Dataset)> {
    let data = Dataset::generate(n_samples, cfg.arch.input_dim(), cfg.data_seed)?;
    Ok((init_for_run(&cfg.arch, cfg, 0)?, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub seed_index: u64,
    pub init_h_abs: f64,
    pub init_hess: f64,
    pub final_loss: f64,
    pub positivity_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// `(width, mean |H_ĝ| at init)` in the order given.
    pub mean_init_h_abs: Vec<(usize, f64)>,
    /// `Some(true)` iff the mean decreases strictly along the widths; `None`
    /// for a single width.
    pub decreasing: Option<bool>,
}

/// Trains every `(width, seed)` cell with constant width `w` (inputs of
/// dimension `w`) at the depth and activation of `base.arch`. Cells run in
/// parallel; the dataset of width `w` is shared by its seeds.
pub fn width_sweep(base: &TrainConfig, widths: &[usize], n_seeds: usize, n_samples: usize) -> Result<SweepReport> {
    if widths.is_empty() || n_seeds == 0 {
        return Err(Error::Config("sweep needs at least one width and one seed".into()));
    }
    let depth = base.arch.depth();
    let activation = base.arch.activation();
    let datasets: Vec<Dataset> = widths
        .iter()
        .map(|&w| Dataset::generate(n_samples, w, base.data_seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..widths.len())
        .flat_map(|wi| (0..n_seeds as u64).map(move |s| (wi, s)))
        .collect();
    let cells = jobs
        .into_par_iter()
        .map(|(wi, s)| {
            let width = widths[wi];
            let arch = Architecture::constant_width(width, depth, activation)?;
            let cfg = TrainConfig {
                arch: arch.clone(),
                ..base.clone()
            };
            let mut net = init_for_run(&arch, &cfg, s)?;
            let log = sgd_train(&mut net, &datasets[wi], &cfg)?;
            let first = log
                .records
                .first()
                .filter(|r| r.hess_proj.is_some())
                .ok_or_else(|| Error::Config("sweep needs a probe at step 0".into()))?;
            Ok(SweepCell {
                width,
                seed_index: s,
                init_h_abs: first.h_proj.unwrap().abs(),
                init_hess: first.hess_proj.unwrap(),
                final_loss: log.epoch_losses.last().copied().unwrap_or(f64::NAN),
                positivity_fraction: log.positivity_fraction().unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_init_h_abs: Vec<(usize, f64)> = widths
        .iter()
        .map(|&w| {
            let v: Vec<f64> = cells.iter().filter(|c| c.width == w).map(|c| c.init_h_abs).collect();
            (w, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let decreasing = (widths.len() >= 2).then(|| mean_init_h_abs.windows(2).all(|p| p[1].1 < p[0].1));
    Ok(SweepReport {
        cells,
        mean_init_h_abs,
        decreasing,
    })
}
