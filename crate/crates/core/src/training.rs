//! Pretraining, ablation matrix, layer-specific fine-tuning and the
//! supervision-ratio sweep.
//!
//! A batch is a set of windows over the whole graph. Windows are stacked
//! in micro-batches of fixed size; micro-batches may run on parallel
//! workers and their gradients are summed in micro-batch order, so the
//! result does not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{self, median, reach_avg_nse};
use crate::grc::{
    self, batch_adjacency, bind, init_params, window_targets, BatchInput, Checkpoint, Components,
    GrcConfig, GrcParams, N_STATE,
};
use crate::network::{GaugeSet, RiverGraph};
use crate::oracle::Variable;
use crate::pipeline::{windows_in, Dataset, NormalizedData, Partition};

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// L2 coefficient on non-bias weights.
    pub weight_decay: f64,
    pub seed: u64,
    /// Anchor spacing of training windows.
    pub stride: usize,
    /// Anchor spacing of validation windows.
    pub val_stride: usize,
    /// Optional cap on training windows drawn per epoch.
    pub windows_per_epoch: Option<usize>,
    /// Windows stacked into one tape.
    pub micro_batch: usize,
    /// Parallel workers; 0 uses the global pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 16,
            lr: 1e-3,
            plateau_factor: 0.3,
            plateau_patience: 5,
            early_stop_patience: 10,
            weight_decay: 1e-5,
            seed: 0,
            stride: 3,
            val_stride: 3,
            windows_per_epoch: None,
            micro_batch: 4,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.micro_batch == 0 || self.stride == 0 || self.val_stride == 0 {
            return Err(Error::invalid(
                "batch, micro_batch, stride and val_stride must be at least 1",
            ));
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!(
                "lr must be positive and plateau_factor in (0, 1): lr={}, factor={}",
                self.lr, self.plateau_factor
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Mean squared error over every element plus `weight_decay · Σ w²` over
/// non-bias tensors.
pub fn loss(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    params: &GrcParams,
    weight_decay: f64,
) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len().max(1) as f64;
    Ok(mse + weight_decay * params.weight_sq_norm())
}

/// Adam with per-tensor learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Array2::zeros(s), Array2::zeros(s)))
            .unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn for_params(params: &GrcParams) -> Self {
        Self::new(params.tensors.iter().map(|t| t.value.dim()))
    }

    /// One update. Tensors with `lrs[k] == 0` or no gradient are untouched.
    pub fn step(&mut self, values: &mut [&mut Array2<f64>], grads: &[Option<Array2<f64>>], lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, value) in values.iter_mut().enumerate() {
            let (Some(g), lr) = (&grads[k], lrs[k]) else { continue };
            if lr == 0.0 {
                continue;
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut self.m[k])
                .and(&mut self.v[k])
                .and(&mut **value)
                .and(g)
                .for_each(|m, v, w, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored value has
/// failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's value and returns the learning rate for the next
    /// epoch.
    pub fn step(&mut self, value: f64) -> f64 {
        if value < self.best {
            self.best = value;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Tracks the best epoch and signals a stop after `patience` epochs
/// without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn step(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    /// `train_log.csv`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub params: GrcParams,
    pub log: TrainLog,
}

/// Which reaches and channels enter the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask {
    pub reaches: Vec<bool>,
    pub channels: [bool; N_STATE],
}

impl LossMask {
    pub fn discharge_at(n_reaches: usize, gauges: &[usize]) -> Self {
        let mut reaches = vec![false; n_reaches];
        for &g in gauges {
            reaches[g] = true;
        }
        Self {
            reaches,
            channels: [true, false, false],
        }
    }

    fn weights(&self, n_windows: usize) -> Array2<f64> {
        let n = self.reaches.len();
        Array2::from_shape_fn((n_windows * n, N_STATE), |(row, k)| {
            (self.reaches[row % n] && self.channels[k]) as u8 as f64
        })
    }

    fn count(&self) -> usize {
        self.reaches.iter().filter(|&&r| r).count() * self.channels.iter().filter(|&&c| c).count()
    }
}

/// Everything the optimizer needs besides the parameters.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub cfg: &'a GrcConfig,
    pub graph: &'a RiverGraph,
    /// Model inputs.
    pub inputs: &'a NormalizedData,
    /// Normalized truth; may differ from `inputs` (e.g. observations).
    pub targets: &'a NormalizedData,
    pub mask: Option<LossMask>,
    pub train_t0s: Vec<usize>,
    pub val_t0s: Vec<usize>,
}

impl Objective<'_> {
    fn elems_per_window(&self) -> usize {
        let per_step = match &self.mask {
            Some(m) => m.count(),
            None => self.graph.n_reaches() * N_STATE,
        };
        per_step * self.cfg.f_horizon
    }

    /// Sum over `t0s` of the squared (masked) error, divided by `denom`,
    /// with gradients for the trainable tensors.
    fn micro_batch(
        &self,
        params: &GrcParams,
        t0s: &[usize],
        trainable: &[bool],
        denom: f64,
        with_grad: bool,
    ) -> Result<(f64, BTreeMap<usize, Array2<f64>>)> {
        let tape = Tape::new();
        let p = bind(&tape, self.cfg, params, |k| with_grad && trainable[k])?;
        let adj = batch_adjacency(self.cfg, self.graph, t0s.len());
        let input = BatchInput::from_windows(self.cfg, self.inputs, t0s)?;
        let preds = grc::unroll(&tape, self.cfg, &p, adj.as_ref(), &input)?;
        let truth = window_targets(self.cfg, self.targets, t0s);
        let weights = self.mask.as_ref().map(|m| tape.constant(m.weights(t0s.len())));
        let mut total: Option<Var<'_>> = None;
        for (pv, tv) in preds.iter().zip(truth) {
            let mut diff = pv.sub(&tape.constant(tv))?;
            if let Some(w) = &weights {
                diff = diff.hadamard(w)?;
            }
            let sq = diff.sum_squares();
            total = Some(match total {
                Some(acc) => acc.add(&sq)?,
                None => sq,
            });
        }
        let loss = total.expect("f_horizon >= 1").scale(1.0 / denom);
        let value = loss.scalar();
        if !with_grad || !value.is_finite() {
            return Ok((value, BTreeMap::new()));
        }
        Ok((value, tape.backward_params(loss)?))
    }

    /// Data loss (and gradients) of one batch.
    fn batch(
        &self,
        params: &GrcParams,
        t0s: &[usize],
        trainable: &[bool],
        tc: &TrainConfig,
        with_grad: bool,
    ) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
        let denom = (self.elems_per_window() * t0s.len()).max(1) as f64;
        let chunks: Vec<&[usize]> = t0s.chunks(tc.micro_batch).collect();
        let run = || -> Vec<Result<(f64, BTreeMap<usize, Array2<f64>>)>> {
            chunks
                .par_iter()
                .map(|c| self.micro_batch(params, c, trainable, denom, with_grad))
                .collect()
        };
        let results = with_pool(tc.workers, run);
        let mut loss = 0.0;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; params.tensors.len()];
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (k, gk) in g {
                match &mut grads[k] {
                    Some(acc) => *acc += &gk,
                    slot => *slot = Some(gk),
                }
            }
        }
        Ok((loss, grads))
    }

    /// Mean validation data loss.
    pub fn val_loss(&self, params: &GrcParams, tc: &TrainConfig) -> Result<f64> {
        if self.val_t0s.is_empty() {
            return Err(Error::invalid("no validation windows"));
        }
        let none = vec![false; params.tensors.len()];
        let batch = tc.batch.max(tc.micro_batch);
        let mut total = 0.0;
        for group in self.val_t0s.chunks(batch) {
            let (l, _) = self.batch(params, group, &none, tc, false)?;
            total += l * group.len() as f64;
        }
        Ok(total / self.val_t0s.len() as f64)
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Optimizes `init` on `obj`. Tensor `k` is trained at `lr · lr_scale[k]`
/// (0 freezes it). Returns the best-validation parameters; a non-finite
/// training loss aborts with [`Error::Diverged`].
pub fn fit(
    obj: &Objective<'_>,
    init: GrcParams,
    lr_scale: &[f64],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if lr_scale.len() != init.tensors.len() {
        return Err(Error::mismatch("lr scale entries", init.tensors.len(), lr_scale.len()));
    }
    if obj.train_t0s.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    let trainable: Vec<bool> = lr_scale.iter().map(|&s| s != 0.0).collect();
    let mut params = init;
    let mut best = params.clone();
    let mut adam = Adam::for_params(&params);
    let mut plateau = Plateau::new(tc.lr, tc.plateau_factor, tc.plateau_patience);
    let mut stop = EarlyStop::new(tc.early_stop_patience);
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::NAN,
        stopped_early: false,
    };
    if tc.epochs == 0 {
        return Ok(TrainOutcome { params, log });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut order = obj.train_t0s.clone();
    for epoch in 1..=tc.epochs {
        let lr = plateau.lr;
        order.shuffle(&mut rng);
        let take = tc.windows_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for t0s in order[..take].chunks(tc.batch) {
            let (data_loss, mut grads) = obj.batch(&params, t0s, &trainable, tc, true)?;
            let total = data_loss + tc.weight_decay * trainable_weight_norm(&params, &trainable);
            if !total.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    last_good_epoch: log.best_epoch,
                    last_good: Box::new(best),
                });
            }
            for (k, g) in grads.iter_mut().enumerate() {
                if let Some(g) = g {
                    if !params.tensors[k].is_bias() && tc.weight_decay > 0.0 {
                        g.scaled_add(2.0 * tc.weight_decay, &params.tensors[k].value);
                    }
                }
            }
            let lrs: Vec<f64> = lr_scale.iter().map(|s| s * lr).collect();
            let mut values: Vec<&mut Array2<f64>> =
                params.tensors.iter_mut().map(|t| &mut t.value).collect();
            adam.step(&mut values, &grads, &lrs);
            loss_sum += total;
            n_batches += 1;
        }
        let val = obj.val_loss(&params, tc)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good_epoch: log.best_epoch,
                last_good: Box::new(best),
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_loss: val,
            lr,
        });
        log::info!(
            "epoch {epoch}: train {:.5} val {val:.5} lr {lr:.2e}",
            loss_sum / n_batches.max(1) as f64
        );
        plateau.step(val);
        let (improved, halt) = stop.step(epoch, val);
        if improved {
            best = params.clone();
            log.best_epoch = epoch;
            log.best_val_loss = val;
        }
        if halt {
            log.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { params: best, log })
}

fn trainable_weight_norm(params: &GrcParams, trainable: &[bool]) -> f64 {
    params
        .tensors
        .iter()
        .zip(trainable)
        .filter(|(t, &on)| on && !t.is_bias())
        .map(|(t, _)| t.value.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

fn anchors(ds: &Dataset, cfg: &GrcConfig, p: Partition, stride: usize) -> Vec<usize> {
    windows_in(ds.split.range(p), cfg.h_lag, cfg.f_horizon, stride)
        .iter()
        .map(|w| w.t0)
        .collect()
}

/// Trains a model from `init_params(cfg, seed)` on every reach and
/// variable of `ds`.
pub fn pretrain(cfg: &GrcConfig, tc: &TrainConfig, ds: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let data = ds.normalized();
    let obj = Objective {
        cfg,
        graph: &ds.graph,
        inputs: &data,
        targets: &data,
        mask: None,
        train_t0s: anchors(ds, cfg, Partition::Train, tc.stride),
        val_t0s: anchors(ds, cfg, Partition::Val, tc.val_stride),
    };
    let init = init_params(cfg, tc.seed)?;
    let scale = vec![1.0; init.tensors.len()];
    let out = fit(&obj, init, &scale, tc)?;
    Ok((
        Checkpoint {
            cfg: cfg.clone(),
            params: out.params,
            seed: tc.seed,
            norm_ref: None,
        },
        out.log,
    ))
}

/// Outcome of one ablation cell.
#[derive(Debug)]
pub enum CellOutcome {
    Trained(Checkpoint, TrainLog),
    Failed(String),
}

/// Trains all eight component subsets with identical budgets and seeds.
/// A failing cell is recorded and the remaining cells still run.
pub fn run_ablation_matrix(
    base: &GrcConfig,
    tc: &TrainConfig,
    ds: &Dataset,
) -> BTreeMap<Components, CellOutcome> {
    Components::all()
        .into_iter()
        .map(|c| {
            let cfg = base.clone().with_components(c);
            let outcome = match pretrain(&cfg, tc, ds) {
                Ok((ckpt, log)) => CellOutcome::Trained(ckpt, log),
                Err(e) => {
                    log::warn!("ablation cell {c} failed: {e}");
                    CellOutcome::Failed(e.to_string())
                }
            };
            (c, outcome)
        })
        .collect()
}

/// Layer-specific fine-tuning: which layers are frozen and the learning
/// rate multiplier of each tuned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub frozen: BTreeSet<String>,
    pub tuned: BTreeMap<String, f64>,
    pub base_lr: f64,
}

impl FinetuneConfig {
    /// Freezes fusion, input projection, GRU and all but the deepest graph
    /// layer; the deepest graph layer runs at `0.1 · base_lr` and the
    /// readout at `base_lr`.
    pub fn standard(cfg: &GrcConfig, base_lr: f64) -> Self {
        let deepest = format!("gcn.{}", cfg.n_gcn_layers - 1);
        let tuned: BTreeMap<String, f64> =
            [(deepest, 0.1), ("readout".to_string(), 1.0)].into_iter().collect();
        let frozen = cfg
            .layer_names()
            .into_iter()
            .filter(|l| !tuned.contains_key(l))
            .collect();
        Self {
            frozen,
            tuned,
            base_lr,
        }
    }

    pub fn validate(&self, cfg: &GrcConfig) -> Result<()> {
        let all = grc::layer_set(cfg);
        if let Some(both) = self.frozen.iter().find(|l| self.tuned.contains_key(*l)) {
            return Err(Error::invalid(format!("layer {both} is both frozen and tuned")));
        }
        let covered: BTreeSet<String> = self
            .frozen
            .iter()
            .cloned()
            .chain(self.tuned.keys().cloned())
            .collect();
        if covered != all {
            return Err(Error::mismatch(
                "frozen ∪ tuned layers",
                format!("{all:?}"),
                format!("{covered:?}"),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        Ok(())
    }

    fn lr_scale(&self, params: &GrcParams) -> Vec<f64> {
        params
            .tensors
            .iter()
            .map(|t| self.tuned.get(&t.layer).copied().unwrap_or(0.0))
            .collect()
    }
}

/// Fine-tunes `ckpt` on discharge at `gauges` of the observation dataset
/// `obs` (its train / val split). With `ft = None` every layer is trained
/// at `tc.lr`, which is the from-scratch baseline when `ckpt` is freshly
/// initialized.
pub fn finetune(
    ckpt: &Checkpoint,
    ft: Option<&FinetuneConfig>,
    tc: &TrainConfig,
    obs: &Dataset,
    gauges: &[usize],
) -> Result<(Checkpoint, TrainLog)> {
    if gauges.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one supervised gauge"));
    }
    if let Some(&bad) = gauges.iter().find(|&&g| g >= obs.n_reaches()) {
        return Err(Error::invalid(format!(
            "gauge {bad} is not a reach of the {}-reach graph",
            obs.n_reaches()
        )));
    }
    let cfg = &ckpt.cfg;
    let (scale, tc) = match ft {
        Some(ft) => {
            ft.validate(cfg)?;
            (
                ft.lr_scale(&ckpt.params),
                TrainConfig {
                    lr: ft.base_lr,
                    ..tc.clone()
                },
            )
        }
        None => (vec![1.0; ckpt.params.tensors.len()], tc.clone()),
    };
    let data = obs.normalized();
    let obj = Objective {
        cfg,
        graph: &obs.graph,
        inputs: &data,
        targets: &data,
        mask: Some(LossMask::discharge_at(obs.n_reaches(), gauges)),
        train_t0s: anchors(obs, cfg, Partition::Train, tc.stride),
        val_t0s: anchors(obs, cfg, Partition::Val, tc.val_stride),
    };
    let out = fit(&obj, ckpt.params.clone(), &scale, &tc)?;
    Ok((
        Checkpoint {
            params: out.params,
            ..ckpt.clone()
        },
        out.log,
    ))
}

/// Median lead-averaged discharge NSE over a reach set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeScores {
    pub supervised: Option<f64>,
    /// `None` when every candidate is supervised.
    pub unsupervised: Option<f64>,
    pub all: Option<f64>,
}

/// Scores `params` on the test split of `obs` at the gauges of `set`.
pub fn gauge_scores(
    cfg: &GrcConfig,
    params: &GrcParams,
    obs: &Dataset,
    set: &GaugeSet,
    stride: usize,
    chunk: usize,
) -> Result<GaugeScores> {
    let data = obs.normalized();
    let t0s = anchors(obs, cfg, Partition::Test, stride);
    let fc = eval::forecast(cfg, params, obs, &data, &t0s, chunk)?;
    let med = |reaches: &[usize]| -> Option<f64> {
        let v: Vec<f64> = reach_avg_nse(&fc, &obs.hydro, Variable::Discharge, reaches)
            .into_iter()
            .map(|(_, x)| x)
            .collect();
        median(&v)
    };
    let all: Vec<usize> = set
        .supervised
        .iter()
        .chain(&set.unsupervised)
        .copied()
        .collect();
    Ok(GaugeScores {
        supervised: med(&set.supervised),
        unsupervised: if set.unsupervised.is_empty() {
            log::info!("ratio {}‰: no unsupervised gauges, skipping", set.ratio_permille);
            None
        } else {
            med(&set.unsupervised)
        },
        all: med(&all),
    })
}

/// One row of a supervision-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub supervised: Vec<usize>,
    pub unsupervised: Vec<usize>,
    pub pretrained: GaugeScores,
    pub finetuned: GaugeScores,
    pub scratch: Option<GaugeScores>,
}

/// Settings of [`finetune_ratio_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ft: FinetuneConfig,
    /// Budget of the fine-tuning runs.
    pub tc: TrainConfig,
    /// Budget of the from-scratch runs, if any.
    pub scratch: Option<TrainConfig>,
    pub eval_stride: usize,
    pub chunk: usize,
}

/// For each nested gauge set: fine-tune the foundation model (and
/// optionally train a fresh full model on the same gauges) and score both.
pub fn finetune_ratio_sweep(
    foundation: &Checkpoint,
    obs: &Dataset,
    sets: &[GaugeSet],
    sweep: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    let cfg = &foundation.cfg;
    let pretrained_params = &foundation.params;
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let pretrained = gauge_scores(cfg, pretrained_params, obs, set, sweep.eval_stride, sweep.chunk)?;
        let (tuned, _) = finetune(foundation, Some(&sweep.ft), &sweep.tc, obs, &set.supervised)?;
        let finetuned = gauge_scores(cfg, &tuned.params, obs, set, sweep.eval_stride, sweep.chunk)?;
        let scratch = match &sweep.scratch {
            Some(stc) => {
                let fresh = Checkpoint {
                    cfg: cfg.clone(),
                    params: init_params(cfg, stc.seed)?,
                    seed: stc.seed,
                    norm_ref: None,
                };
                let (trained, _) = finetune(&fresh, None, stc, obs, &set.supervised)?;
                Some(gauge_scores(cfg, &trained.params, obs, set, sweep.eval_stride, sweep.chunk)?)
            }
            None => None,
        };
        rows.push(SweepRow {
            ratio: set.ratio_permille as f64 / 1000.0,
            supervised: set.supervised.clone(),
            unsupervised: set.unsupervised.clone(),
            pretrained,
            finetuned,
            scratch,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grc::Mode;
    use crate::network::split_gauges;
    use crate::pipeline::{generate_dataset, DataGenConfig, Dtype, SplitSpec};

    fn tiny_cfg(mode: Mode) -> GrcConfig {
        GrcConfig {
            h_lag: 4,
            f_horizon: 3,
            d_fusion: 8,
            d_hidden: 6,
            ..GrcConfig::new(mode)
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let gen = DataGenConfig {
            n_reaches: 5,
            n_steps: 200,
            spinup_steps: 60,
            seed,
            ..DataGenConfig::default()
        };
        generate_dataset(&gen, SplitSpec::from_lengths(120, 40, 40), Dtype::Float64).unwrap()
    }

    fn tiny_tc(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 8,
            lr: 3e-3,
            stride: 2,
            val_stride: 4,
            micro_batch: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_fixtures() {
        let cfg = tiny_cfg(Mode::ColdStart);
        let p = GrcParams::zeros(&cfg);
        let y = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(loss(&y, &y, &p, 0.0).unwrap(), 0.0);
        assert!((loss(&(&y + 1.0), &y, &p, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let mut d = y.clone();
        d[[0, 0]] += 1.0;
        d[[1, 2]] -= 1.0;
        d[[0, 1]] += 0.2_f64.sqrt();
        let expect = (1.0 + 1.0 + 0.2) / 6.0;
        assert!((loss(&d, &y, &p, 0.0).unwrap() - expect).abs() < 1e-15);
        assert!(loss(&y, &y.t().to_owned(), &p, 0.0).is_err());
    }

    #[test]
    fn loss_adds_weight_decay_on_weights_only() {
        let cfg = tiny_cfg(Mode::ColdStart);
        let mut p = GrcParams::zeros(&cfg);
        for t in &mut p.tensors {
            t.value.fill(1.0);
        }
        let weights: usize = p.tensors.iter().filter(|t| !t.is_bias()).map(|t| t.value.len()).sum();
        let y = Array2::<f64>::zeros((1, 1));
        let l = loss(&y, &y, &p, 0.5).unwrap();
        assert!((l - 0.5 * weights as f64).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic_bowl() {
        let target = Array2::from_shape_vec((2, 2), vec![3.0, -2.0, 0.5, 7.0]).unwrap();
        let mut w = Array2::<f64>::zeros((2, 2));
        let mut adam = Adam::new([(2, 2)]);
        let mut steps = 0;
        while steps < 5000 {
            let g = (&w - &target) * 2.0;
            adam.step(&mut [&mut w], &[Some(g)], &[0.05]);
            steps += 1;
            if (&w - &target).iter().all(|d| d.abs() < 1e-6) {
                break;
            }
        }
        assert!((&w - &target).iter().all(|d| d.abs() < 1e-6), "{w:?} after {steps}");
    }

    #[test]
    fn adam_leaves_zero_rate_tensors_alone() {
        let mut a = Array2::<f64>::ones((2, 2));
        let mut b = Array2::<f64>::ones((1, 3));
        let mut adam = Adam::new([(2, 2), (1, 3)]);
        let g = [Some(Array2::ones((2, 2))), Some(Array2::ones((1, 3)))];
        adam.step(&mut [&mut a, &mut b], &g, &[0.1, 0.0]);
        assert!(a.iter().all(|&v| v < 1.0));
        assert_eq!(b, Array2::<f64>::ones((1, 3)));
    }

    #[test]
    fn plateau_trace() {
        let mut p = Plateau::new(1e-3, 0.3, 5);
        assert_eq!(p.step(1.0), 1e-3);
        let trace: Vec<f64> = (0..5).map(|_| p.step(1.0)).collect();
        assert_eq!(&trace[..4], &[1e-3; 4]);
        assert!((trace[4] - 3e-4).abs() < 1e-18);
        assert!((p.step(0.5) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn early_stop_after_flat_epochs() {
        let mut s = EarlyStop::new(10);
        assert_eq!(s.step(1, 2.0), (true, false));
        for e in 2..=10 {
            assert_eq!(s.step(e, 2.0), (false, false), "epoch {e}");
        }
        assert_eq!(s.step(11, 2.5), (false, true));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn training_reduces_the_loss() {
        let ds = tiny_dataset(3);
        let cfg = tiny_cfg(Mode::ColdStart);
        let (ckpt, log) = pretrain(&cfg, &tiny_tc(8), &ds).unwrap();
        let first = log.epochs.first().unwrap().train_loss;
        let last = log.epochs.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
        assert!(ckpt.params.all_finite());
        assert_eq!(log.to_csv().lines().count(), log.epochs.len() + 1);
    }

    #[test]
    fn hotstart_training_runs() {
        let ds = tiny_dataset(4);
        let (_, log) = pretrain(&tiny_cfg(Mode::HotStart), &tiny_tc(3), &ds).unwrap();
        assert!(log.epochs.iter().all(|e| e.val_loss.is_finite()));
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let ds = tiny_dataset(5);
        let cfg = tiny_cfg(Mode::ColdStart);
        let run = |workers| {
            let tc = TrainConfig { workers, micro_batch: 2, ..tiny_tc(2) };
            pretrain(&cfg, &tc, &ds).unwrap().0.params.to_bytes()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn zero_epochs_return_the_input() {
        let ds = tiny_dataset(6);
        let cfg = tiny_cfg(Mode::ColdStart);
        let ckpt = pretrain(&cfg, &tiny_tc(1), &ds).unwrap().0;
        let ft = FinetuneConfig::standard(&cfg, 1e-3);
        let (out, log) = finetune(&ckpt, Some(&ft), &tiny_tc(0), &ds, &[0, 2]).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(out.params.to_bytes(), ckpt.params.to_bytes());
    }

    #[test]
    fn finetuning_leaves_frozen_layers_bit_identical() {
        let ds = tiny_dataset(7);
        let cfg = tiny_cfg(Mode::ColdStart);
        let ckpt = pretrain(&cfg, &tiny_tc(1), &ds).unwrap().0;
        let ft = FinetuneConfig::standard(&cfg, 1e-3);
        let (out, _) = finetune(&ckpt, Some(&ft), &tiny_tc(2), &ds, &[1, 3]).unwrap();
        let mut changed = BTreeSet::new();
        for (a, b) in ckpt.params.tensors.iter().zip(&out.params.tensors) {
            let same = a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits());
            if ft.frozen.contains(&a.layer) {
                assert!(same, "{}.{} moved", a.layer, a.name);
            } else if !same {
                changed.insert(a.layer.clone());
            }
        }
        assert!(changed.contains("readout"));
    }

    #[test]
    fn finetune_rejects_bad_gauges_and_layer_sets() {
        let ds = tiny_dataset(8);
        let cfg = tiny_cfg(Mode::ColdStart);
        let ckpt = Checkpoint {
            cfg: cfg.clone(),
            params: init_params(&cfg, 0).unwrap(),
            seed: 0,
            norm_ref: None,
        };
        let ft = FinetuneConfig::standard(&cfg, 1e-3);
        assert!(matches!(
            finetune(&ckpt, Some(&ft), &tiny_tc(1), &ds, &[5]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(finetune(&ckpt, Some(&ft), &tiny_tc(1), &ds, &[]).is_err());
        let mut partial = ft.clone();
        partial.frozen.remove("fusion");
        assert!(partial.validate(&cfg).is_err());
        let mut both = ft.clone();
        both.frozen.insert("readout".into());
        assert!(both.validate(&cfg).is_err());
    }

    #[test]
    fn standard_finetune_layers() {
        let cfg = tiny_cfg(Mode::HotStart);
        let ft = FinetuneConfig::standard(&cfg, 1e-3);
        ft.validate(&cfg).unwrap();
        assert_eq!(ft.tuned["gcn.1"], 0.1);
        assert_eq!(ft.tuned["readout"], 1.0);
        assert!(ft.frozen.contains("gcn.0") && ft.frozen.contains("gru"));
    }

    #[test]
    fn masked_loss_only_sees_gauges() {
        let m = LossMask::discharge_at(3, &[2]);
        let w = m.weights(2);
        assert_eq!(w.dim(), (6, 3));
        assert_eq!(w.sum(), 2.0);
        assert_eq!(w[[2, 0]], 1.0);
        assert_eq!(w[[5, 0]], 1.0);
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn sweep_rows_follow_nested_gauge_sets() {
        let ds = tiny_dataset(9);
        let cfg = tiny_cfg(Mode::ColdStart);
        let ckpt = pretrain(&cfg, &tiny_tc(1), &ds).unwrap().0;
        let sets = split_gauges(&ds.graph, &[0, 1, 2, 3, 4], &[0.2, 0.6, 1.0], 1).unwrap();
        let sweep = SweepConfig {
            ft: FinetuneConfig::standard(&cfg, 1e-3),
            tc: tiny_tc(1),
            scratch: Some(tiny_tc(1)),
            eval_stride: 4,
            chunk: 8,
        };
        let rows = finetune_ratio_sweep(&ckpt, &ds, &sets, &sweep).unwrap();
        assert_eq!(rows.len(), 3);
        for w in rows.windows(2) {
            assert!(w[0].supervised.iter().all(|g| w[1].supervised.contains(g)));
        }
        assert_eq!(rows[2].unsupervised.len(), 0);
        assert_eq!(rows[2].finetuned.unsupervised, None);
        assert!(rows.iter().all(|r| r.scratch.is_some() && r.finetuned.all.is_some()));
    }

    #[test]
    fn ablation_matrix_has_every_cell() {
        let ds = tiny_dataset(10);
        let m = run_ablation_matrix(&tiny_cfg(Mode::ColdStart), &tiny_tc(1), &ds);
        assert_eq!(m.len(), 8);
        assert!(m.values().all(|o| matches!(o, CellOutcome::Trained(..))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
