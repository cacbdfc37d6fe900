//! Normalization statistics, sliding windows, temporal splits and the
//! on-disk dataset layout.
//!
//! A dataset directory holds
//!
//! ```text
//! graph.json     reach graph and static attributes
//! forcing.bin    runoff, reach-major
//! hydro.bin      discharge, depth, storage blocks, each reach-major
//! manifest.json  shape, dtype, split and generator settings
//! norm.json      statistics fitted on the training split
//! ```
//!
//! Binary files are raw little-endian floats whose width is given by the
//! manifest `dtype`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grc::GrcConfig;
use crate::network::{self, RiverGraph, StaticFeatureTable, N_STATIC, STATIC_FEATURE_NAMES};
use crate::oracle::{
    self, ForcingSeries, HydroSeries, OraclePhysics, Regime, RouteConfig, Variable,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Dynamic series with reach-wise statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamic {
    Discharge,
    Depth,
    Storage,
    Runoff,
}

impl Dynamic {
    pub const ALL: [Dynamic; 4] = [
        Dynamic::Discharge,
        Dynamic::Depth,
        Dynamic::Storage,
        Dynamic::Runoff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dynamic::Discharge => "discharge",
            Dynamic::Depth => "depth",
            Dynamic::Storage => "storage",
            Dynamic::Runoff => "runoff",
        }
    }
}

impl From<Variable> for Dynamic {
    fn from(v: Variable) -> Self {
        match v {
            Variable::Discharge => Dynamic::Discharge,
            Variable::Depth => Dynamic::Depth,
            Variable::Storage => Dynamic::Storage,
        }
    }
}

/// Mean and floored standard deviation per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    fn fit<'a>(columns: impl Iterator<Item = ndarray::ArrayView1<'a, f64>>) -> Self {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for col in columns {
            let n = col.len() as f64;
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(floor_sigma(var.sqrt(), mu));
        }
        Self { mean, std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// `max(sigma, 1e-6 (|mu| + 1))`.
pub fn floor_sigma(sigma: f64, mu: f64) -> f64 {
    sigma.max(1e-6 * (mu.abs() + 1.0))
}

/// Reach-wise statistics for the dynamic series and global statistics for
/// the static attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub discharge: Moments,
    pub depth: Moments,
    pub storage: Moments,
    pub runoff: Moments,
    pub statics: Moments,
}

impl NormStats {
    pub fn dynamic(&self, d: Dynamic) -> &Moments {
        match d {
            Dynamic::Discharge => &self.discharge,
            Dynamic::Depth => &self.depth,
            Dynamic::Storage => &self.storage,
            Dynamic::Runoff => &self.runoff,
        }
    }

    pub fn n_reaches(&self) -> usize {
        self.discharge.len()
    }

    pub fn normalize(&self, d: Dynamic, reach: usize, v: f64) -> f64 {
        let m = self.dynamic(d);
        (v - m.mean[reach]) / m.std[reach]
    }

    pub fn denormalize(&self, d: Dynamic, reach: usize, v: f64) -> f64 {
        let m = self.dynamic(d);
        v * m.std[reach] + m.mean[reach]
    }

    /// Applies [`NormStats::normalize`] to an `n_reaches x n_steps` array.
    pub fn normalize_series(&self, d: Dynamic, series: &Array2<f64>) -> Array2<f64> {
        let mut out = series.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let m = self.dynamic(d);
            let (mu, sd) = (m.mean[i], m.std[i]);
            row.mapv_inplace(|v| (v - mu) / sd);
        }
        out
    }

    pub fn denormalize_series(&self, d: Dynamic, series: &Array2<f64>) -> Array2<f64> {
        let mut out = series.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let m = self.dynamic(d);
            let (mu, sd) = (m.mean[i], m.std[i]);
            row.mapv_inplace(|v| v * sd + mu);
        }
        out
    }

    /// `n_reaches x N_STATIC` globally normalized static matrix.
    pub fn normalize_statics(&self, feats: &StaticFeatureTable) -> Array2<f64> {
        let mut m = feats.to_matrix();
        for (k, mut col) in m.columns_mut().into_iter().enumerate() {
            let (mu, sd) = (self.statics.mean[k], self.statics.std[k]);
            col.mapv_inplace(|v| (v - mu) / sd);
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        let dynamic = Dynamic::ALL
            .iter()
            .map(|&d| {
                let m = self.dynamic(d);
                let rows = (0..m.len())
                    .map(|i| ReachMoment {
                        reach: i,
                        mean: m.mean[i],
                        std: m.std[i],
                    })
                    .collect();
                (d.name().to_string(), rows)
            })
            .collect();
        let statics = (0..self.statics.len())
            .map(|k| FeatureMoment {
                feature: STATIC_FEATURE_NAMES[k].to_string(),
                mean: self.statics.mean[k],
                std: self.statics.std[k],
            })
            .collect();
        Ok(serde_json::to_string_pretty(&NormFile { dynamic, statics })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NormFile = serde_json::from_str(text)?;
        let take = |d: Dynamic| -> Result<Moments> {
            let rows = file
                .dynamic
                .get(d.name())
                .ok_or_else(|| Error::mismatch("norm.json", d.name(), "missing"))?;
            let mut m = Moments {
                mean: Vec::with_capacity(rows.len()),
                std: Vec::with_capacity(rows.len()),
            };
            for (i, r) in rows.iter().enumerate() {
                if r.reach != i {
                    return Err(Error::mismatch(
                        format!("norm.json {} reach order", d.name()),
                        i,
                        r.reach,
                    ));
                }
                m.mean.push(r.mean);
                m.std.push(r.std);
            }
            Ok(m)
        };
        if file.statics.len() != N_STATIC {
            return Err(Error::mismatch(
                "norm.json static features",
                N_STATIC,
                file.statics.len(),
            ));
        }
        for (k, f) in file.statics.iter().enumerate() {
            if f.feature != STATIC_FEATURE_NAMES[k] {
                return Err(Error::mismatch(
                    "norm.json static feature",
                    STATIC_FEATURE_NAMES[k],
                    &f.feature,
                ));
            }
        }
        Ok(Self {
            discharge: take(Dynamic::Discharge)?,
            depth: take(Dynamic::Depth)?,
            storage: take(Dynamic::Storage)?,
            runoff: take(Dynamic::Runoff)?,
            statics: Moments {
                mean: file.statics.iter().map(|f| f.mean).collect(),
                std: file.statics.iter().map(|f| f.std).collect(),
            },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ReachMoment {
    reach: usize,
    mean: f64,
    std: f64,
}

#[derive(Serialize, Deserialize)]
struct FeatureMoment {
    feature: String,
    mean: f64,
    std: f64,
}

#[derive(Serialize, Deserialize)]
struct NormFile {
    dynamic: std::collections::BTreeMap<String, Vec<ReachMoment>>,
    statics: Vec<FeatureMoment>,
}

/// Fits statistics on steps `train` only.
pub fn fit_norm(
    hydro: &HydroSeries,
    forcing: &ForcingSeries,
    feats: &StaticFeatureTable,
    train: Range<usize>,
) -> Result<NormStats> {
    if train.is_empty() || train.end > hydro.n_steps() || train.end > forcing.n_steps() {
        return Err(Error::invalid(format!(
            "training range {train:?} is empty or exceeds the series ({} steps)",
            hydro.n_steps().min(forcing.n_steps())
        )));
    }
    let reach_moments = |a: &Array2<f64>| {
        let view = a.slice(ndarray::s![.., train.clone()]);
        Moments::fit(view.rows().into_iter())
    };
    let statics = feats.to_matrix();
    Ok(NormStats {
        discharge: reach_moments(&hydro.discharge),
        depth: reach_moments(&hydro.depth),
        storage: reach_moments(&hydro.storage),
        runoff: reach_moments(&forcing.runoff),
        statics: Moments::fit(statics.columns().into_iter()),
    })
}

/// Contiguous, ordered train / validation / test step ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Partition of a [`SplitSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    /// Consecutive ranges of the given lengths starting at step 0.
    pub fn from_lengths(train: usize, val: usize, test: usize) -> Self {
        Self {
            train: 0..train,
            val: train..train + val,
            test: train + val..train + val + test,
        }
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if self.train.start > self.train.end
            || self.val.start > self.val.end
            || self.test.start > self.test.end
        {
            return Err(Error::invalid(format!("reversed range in split {self:?}")));
        }
        if self.train.end != self.val.start || self.val.end != self.test.start {
            return Err(Error::invalid(format!(
                "split ranges must be contiguous and ordered: {self:?}"
            )));
        }
        if self.test.end > n_steps {
            return Err(Error::mismatch("split end step", n_steps, self.test.end));
        }
        Ok(())
    }

    pub fn range(&self, p: Partition) -> Range<usize> {
        match p {
            Partition::Train => self.train.clone(),
            Partition::Val => self.val.clone(),
            Partition::Test => self.test.clone(),
        }
    }
}

/// One lag + forecast window anchored at `t0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub t0: usize,
    pub lag: Range<usize>,
    pub future: Range<usize>,
}

impl WindowSample {
    /// Every step the window touches, `lag.start..future.end`.
    pub fn span(&self) -> Range<usize> {
        self.lag.start..self.future.end
    }
}

/// Windows of `h` lag and `f` future steps inside `part`, anchors every
/// `stride` steps. A partition shorter than `h + f` yields no windows.
pub fn windows_in(part: Range<usize>, h: usize, f: usize, stride: usize) -> Vec<WindowSample> {
    let stride = stride.max(1);
    let len = part.end.saturating_sub(part.start);
    if len < h + f {
        log::warn!(
            "partition {part:?} holds {len} steps, fewer than lag {h} + horizon {f}; no windows"
        );
        return Vec::new();
    }
    let count = (len - h - f) / stride + 1;
    (0..count)
        .map(|k| {
            let t0 = part.start + h + k * stride;
            WindowSample {
                t0,
                lag: t0 - h..t0,
                future: t0..t0 + f,
            }
        })
        .collect()
}

/// Windows per partition for the lag / horizon in `cfg`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitWindows {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl SplitWindows {
    pub fn get(&self, p: Partition) -> &[WindowSample] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

pub fn make_windows(split: &SplitSpec, cfg: &GrcConfig, stride: usize) -> SplitWindows {
    let w = |r: Range<usize>| windows_in(r, cfg.h_lag, cfg.f_horizon, stride);
    SplitWindows {
        train: w(split.train.clone()),
        val: w(split.val.clone()),
        test: w(split.test.clone()),
    }
}

/// On-disk float width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    Float32,
    Float64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }

    /// Rounds `v` to what this dtype can store.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::Float32 => v as f32 as f64,
            Dtype::Float64 => v,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" => Ok(Dtype::Float32),
            "float64" | "f64" => Ok(Dtype::Float64),
            _ => Err(Error::invalid(format!(
                "unknown dtype '{s}' (expected float32 or float64)"
            ))),
        }
    }
}

/// Settings a dataset was generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub n_reaches: usize,
    pub branching_prob: f64,
    pub n_steps: usize,
    pub spinup_steps: usize,
    pub regime: Regime,
    pub physics: OraclePhysics,
    pub route: RouteConfig,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_reaches: 200,
            branching_prob: 0.3,
            n_steps: 2800,
            spinup_steps: 365,
            regime: Regime::Humid,
            physics: OraclePhysics::default(),
            route: RouteConfig::default(),
            seed: 0,
        }
    }
}

/// `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_reaches: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub dtype: Dtype,
    pub split: SplitSpec,
    pub variables: Vec<String>,
    pub generator: Option<DataGenConfig>,
}

/// Graph, attributes, forcing, routed states, split and fitted statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: RiverGraph,
    pub feats: StaticFeatureTable,
    pub forcing: ForcingSeries,
    pub hydro: HydroSeries,
    pub split: SplitSpec,
    pub norm: NormStats,
    pub dtype: Dtype,
    pub generator: Option<DataGenConfig>,
}

impl Dataset {
    /// Assembles a dataset: quantizes the series to `dtype` (so what is
    /// written is what is held in memory) and fits statistics on the
    /// training range.
    pub fn assemble(
        graph: RiverGraph,
        feats: StaticFeatureTable,
        mut forcing: ForcingSeries,
        mut hydro: HydroSeries,
        split: SplitSpec,
        dtype: Dtype,
    ) -> Result<Self> {
        feats.validate(&graph)?;
        let n = graph.n_reaches();
        if forcing.n_reaches() != n || hydro.n_reaches() != n {
            return Err(Error::mismatch(
                "series reach count",
                n,
                format!("forcing {} / hydro {}", forcing.n_reaches(), hydro.n_reaches()),
            ));
        }
        if forcing.n_steps() != hydro.n_steps() {
            return Err(Error::mismatch(
                "hydro steps",
                forcing.n_steps(),
                hydro.n_steps(),
            ));
        }
        split.validate(forcing.n_steps())?;
        forcing.runoff.mapv_inplace(|v| dtype.quantize(v));
        for var in Variable::ALL {
            hydro.get_mut(var).mapv_inplace(|v| dtype.quantize(v));
        }
        let norm = fit_norm(&hydro, &forcing, &feats, split.train.clone())?;
        Ok(Self {
            graph,
            feats,
            forcing,
            hydro,
            split,
            norm,
            dtype,
            generator: None,
        })
    }

    pub fn n_reaches(&self) -> usize {
        self.graph.n_reaches()
    }

    pub fn n_steps(&self) -> usize {
        self.forcing.n_steps()
    }

    /// Same graph and forcing with a different routed record (for example
    /// perturbed-physics observations). Statistics are kept so both records
    /// live in the same normalized space.
    pub fn with_hydro(&self, mut hydro: HydroSeries) -> Result<Self> {
        if hydro.n_reaches() != self.n_reaches() || hydro.n_steps() != self.n_steps() {
            return Err(Error::mismatch(
                "hydro shape",
                format!("{} x {}", self.n_reaches(), self.n_steps()),
                format!("{} x {}", hydro.n_reaches(), hydro.n_steps()),
            ));
        }
        for var in Variable::ALL {
            hydro.get_mut(var).mapv_inplace(|v| self.dtype.quantize(v));
        }
        Ok(Self {
            hydro,
            ..self.clone()
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            n_reaches: self.n_reaches(),
            n_steps: self.n_steps(),
            dt: self.forcing.dt,
            dtype: self.dtype,
            split: self.split.clone(),
            variables: Variable::ALL.iter().map(|v| v.name().to_string()).collect(),
            generator: self.generator.clone(),
        }
    }

    /// Normalized arrays ready for windowing.
    pub fn normalized(&self) -> NormalizedData {
        let norm = &self.norm;
        NormalizedData {
            statics: norm.normalize_statics(&self.feats),
            runoff: norm.normalize_series(Dynamic::Runoff, &self.forcing.runoff),
            states: Variable::ALL
                .map(|v| norm.normalize_series(v.into(), self.hydro.get(v))),
        }
    }
}

/// Normalized statics (`n x N_STATIC`), runoff and states (`n x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedData {
    pub statics: Array2<f64>,
    pub runoff: Array2<f64>,
    pub states: [Array2<f64>; 3],
}

impl NormalizedData {
    pub fn n_reaches(&self) -> usize {
        self.runoff.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.runoff.ncols()
    }
}

/// Synthesizes a dataset end to end: network, runoff, spin-up routing (the
/// spin-up steps are discarded) and a split of the remaining steps.
pub fn generate_dataset(cfg: &DataGenConfig, split: SplitSpec, dtype: Dtype) -> Result<Dataset> {
    let (graph, feats) = network::generate_network(cfg.n_reaches, cfg.branching_prob, cfg.seed)?;
    generate_dataset_on(graph, feats, cfg, split, dtype)
}

/// Like [`generate_dataset`] on a given network (e.g. a refined one);
/// `cfg.n_reaches` and `cfg.branching_prob` are ignored.
pub fn generate_dataset_on(
    graph: RiverGraph,
    feats: StaticFeatureTable,
    cfg: &DataGenConfig,
    split: SplitSpec,
    dtype: Dtype,
) -> Result<Dataset> {
    if split.test.end != cfg.n_steps {
        return Err(Error::mismatch("split end step", cfg.n_steps, split.test.end));
    }
    let total = cfg.spinup_steps + cfg.n_steps;
    let forcing = oracle::synthesize_runoff(&graph, &feats, total, cfg.seed, cfg.regime)?;
    let routed = oracle::route_with(&graph, &feats, &forcing, &cfg.physics, None, &cfg.route)?;
    let keep = cfg.spinup_steps..total;
    let mut ds = Dataset::assemble(
        graph,
        feats,
        forcing.slice_steps(keep.clone()),
        routed.series.slice_steps(keep),
        split,
        dtype,
    )?;
    ds.generator = Some(cfg.clone());
    Ok(ds)
}

/// Routes the dataset's full forcing (with the same spin-up) under
/// different physics, e.g. perturbed-oracle observations.
pub fn reroute(ds: &Dataset, physics: &OraclePhysics) -> Result<HydroSeries> {
    let gen = ds
        .generator
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset carries no generator settings to reroute with"))?;
    let total = gen.spinup_steps + gen.n_steps;
    let forcing = oracle::synthesize_runoff(&ds.graph, &ds.feats, total, gen.seed, gen.regime)?;
    let routed = oracle::route_with(&ds.graph, &ds.feats, &forcing, physics, None, &gen.route)?;
    Ok(routed.series.slice_steps(gen.spinup_steps..total))
}

fn write_floats(path: &Path, data: impl Iterator<Item = f64>, dtype: Dtype) -> Result<()> {
    let mut bytes = Vec::new();
    for v in data {
        match dtype {
            Dtype::Float32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::Float64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, bytes).map_err(|e| io_context(path, e))
}

fn read_floats(path: &Path, expected: usize, dtype: Dtype) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| io_context(path, e))?;
    let w = dtype.width();
    if bytes.len() != expected * w {
        return Err(Error::mismatch(
            format!("{} size in bytes", path.display()),
            expected * w,
            bytes.len(),
        ));
    }
    Ok(bytes
        .chunks_exact(w)
        .map(|c| match dtype {
            Dtype::Float32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            Dtype::Float64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect())
}

pub(crate) fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    network::write_graph(&dir.join("graph.json"), &ds.graph, &ds.feats)?;
    write_floats(
        &dir.join("forcing.bin"),
        ds.forcing.runoff.iter().copied(),
        ds.dtype,
    )?;
    let hydro = Variable::ALL
        .iter()
        .flat_map(|&v| ds.hydro.get(v).iter().copied());
    write_floats(&dir.join("hydro.bin"), hydro, ds.dtype)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest())?;
    let path = dir.join("manifest.json");
    fs::write(&path, manifest).map_err(|e| io_context(&path, e))?;
    let path = dir.join("norm.json");
    fs::write(&path, ds.norm.to_json()?).map_err(|e| io_context(&path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_context(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::mismatch(
            "dataset format_version",
            DATASET_FORMAT_VERSION,
            manifest.format_version,
        ));
    }
    let (graph, feats) = network::read_graph(&dir.join("graph.json"))?;
    let (n, t) = (manifest.n_reaches, manifest.n_steps);
    if graph.n_reaches() != n {
        return Err(Error::mismatch("graph.json reaches", n, graph.n_reaches()));
    }
    let runoff = read_floats(&dir.join("forcing.bin"), n * t, manifest.dtype)?;
    let forcing = ForcingSeries::new(
        Array2::from_shape_vec((n, t), runoff).expect("length checked"),
        manifest.dt,
    )?;
    let raw = read_floats(&dir.join("hydro.bin"), 3 * n * t, manifest.dtype)?;
    let block = |k: usize| {
        Array2::from_shape_vec((n, t), raw[k * n * t..(k + 1) * n * t].to_vec())
            .expect("length checked")
    };
    let hydro = HydroSeries {
        discharge: block(0),
        depth: block(1),
        storage: block(2),
    };
    manifest.split.validate(t)?;
    let path = dir.join("norm.json");
    let norm_text = fs::read_to_string(&path).map_err(|e| io_context(&path, e))?;
    let norm = NormStats::from_json(&norm_text)?;
    if norm.n_reaches() != n {
        return Err(Error::mismatch("norm.json reaches", n, norm.n_reaches()));
    }
    Ok(Dataset {
        graph,
        feats,
        forcing,
        hydro,
        split: manifest.split,
        norm,
        dtype: manifest.dtype,
        generator: manifest.generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grc::Mode;
    use ndarray::Array2;

    fn tiny(seed: u64) -> Dataset {
        let cfg = DataGenConfig {
            n_reaches: 6,
            n_steps: 120,
            spinup_steps: 30,
            seed,
            ..DataGenConfig::default()
        };
        generate_dataset(&cfg, SplitSpec::from_lengths(80, 20, 20), Dtype::Float32).unwrap()
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let hydro = HydroSeries {
            discharge: Array2::from_elem((1, 10), 5.0),
            depth: Array2::from_elem((1, 10), 1.0),
            storage: Array2::from_elem((1, 10), 2.0),
        };
        let forcing = ForcingSeries::new(Array2::from_elem((1, 10), 3.0), 1.0).unwrap();
        let (_, feats) = network::generate_network(1, 0.3, 1).unwrap();
        let norm = fit_norm(&hydro, &forcing, &feats, 0..10).unwrap();
        assert_eq!(norm.discharge.mean[0], 5.0);
        assert_eq!(norm.discharge.std[0], 6e-6);
        assert_eq!(norm.normalize(Dynamic::Discharge, 0, 5.0), 0.0);
    }

    #[test]
    fn normalize_roundtrip() {
        let ds = tiny(3);
        let q = &ds.hydro.discharge;
        let back = ds
            .norm
            .denormalize_series(Dynamic::Discharge, &ds.norm.normalize_series(Dynamic::Discharge, q));
        for (a, b) in q.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn stats_ignore_test_slice() {
        let ds = tiny(4);
        let mut hydro = ds.hydro.clone();
        let mut forcing = ds.forcing.clone();
        hydro.discharge.slice_mut(ndarray::s![.., 100..]).fill(1e6);
        forcing.runoff.slice_mut(ndarray::s![.., 100..]).fill(1e6);
        let refit = fit_norm(&hydro, &forcing, &ds.feats, ds.split.train.clone()).unwrap();
        assert_eq!(refit, ds.norm);
    }

    #[test]
    fn window_count_formula() {
        assert_eq!(windows_in(0..27, 20, 7, 1).len(), 1);
        assert_eq!(windows_in(0..26, 20, 7, 1).len(), 0);
        for (len, stride) in [(100, 1), (100, 3), (57, 7), (28, 2)] {
            let expect = (len - 27) / stride + 1;
            assert_eq!(windows_in(0..len, 20, 7, stride).len(), expect);
        }
    }

    #[test]
    fn stride_f_gives_disjoint_futures() {
        let w = windows_in(10..100, 7, 7, 7);
        for pair in w.windows(2) {
            assert_eq!(pair[0].future.end, pair[1].future.start);
        }
    }

    #[test]
    fn windows_stay_in_their_partition() {
        let split = SplitSpec::from_lengths(100, 40, 40);
        let cfg = GrcConfig::new(Mode::ColdStart);
        let w = make_windows(&split, &cfg, 1);
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            let r = split.range(p);
            assert!(!w.get(p).is_empty());
            for s in w.get(p) {
                assert!(s.span().start >= r.start && s.span().end <= r.end, "{p:?} {s:?}");
            }
        }
    }

    #[test]
    fn split_must_be_contiguous() {
        let bad = SplitSpec {
            train: 0..10,
            val: 11..20,
            test: 20..30,
        };
        assert!(bad.validate(30).is_err());
        assert!(SplitSpec::from_lengths(10, 10, 10).validate(29).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let ds = tiny(5);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn float64_roundtrip_is_exact() {
        let mut ds = tiny(6);
        ds.dtype = Dtype::Float64;
        ds.hydro.discharge[[0, 0]] = std::f64::consts::PI;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().hydro, ds.hydro);
    }

    #[test]
    fn float32_values_match_source_in_single_precision() {
        let cfg = DataGenConfig {
            n_reaches: 4,
            n_steps: 60,
            spinup_steps: 10,
            seed: 2,
            ..DataGenConfig::default()
        };
        let split = SplitSpec::from_lengths(40, 10, 10);
        let exact = generate_dataset(&cfg, split.clone(), Dtype::Float64).unwrap();
        let single = generate_dataset(&cfg, split, Dtype::Float32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &single).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        for (a, b) in exact.hydro.storage.iter().zip(back.hydro.storage.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn truncated_hydro_is_a_shape_error() {
        let ds = tiny(7);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("hydro.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Mismatch { what, expected, found }) => {
                assert!(what.contains("hydro.bin"));
                assert_eq!(expected, (bytes.len()).to_string());
                assert_eq!(found, (bytes.len() - 4).to_string());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn norm_json_roundtrip() {
        let ds = tiny(8);
        let text = ds.norm.to_json().unwrap();
        assert!(text.contains("\"uparea\""));
        assert_eq!(NormStats::from_json(&text).unwrap(), ds.norm);
    }
}
