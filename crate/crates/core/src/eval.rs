//! Skill metrics, lead-time and spin-up curves, ablation attribution and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grc::{self, BatchInput, Components, GrcConfig, GrcParams};
use crate::oracle::{HydroSeries, Variable};
use crate::pipeline::{io_context, windows_in, Dataset, NormalizedData, Partition};

/// Nash-Sutcliffe efficiency, `1 - Σ(p - y)² / Σ(y - ȳ)²`. `None` when the
/// series are shorter than 2, differ in length, or the truth is constant.
pub fn nse(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let denom: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if denom <= 0.0 {
        return None;
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum();
    Some(1.0 - num / denom)
}

/// Number of high-flow steps for a series of length `n`:
/// `max(1, ceil((1 - quantile) n))`, with the product snapped to the
/// nearest integer when it lies within rounding noise of one.
pub fn high_flow_count(n: usize, quantile: f64) -> usize {
    let x = (1.0 - quantile) * n as f64;
    let snapped = if (x - x.round()).abs() < 1e-9 * x.abs().max(1.0) {
        x.round()
    } else {
        x.ceil()
    };
    (snapped as usize).clamp(1, n.max(1))
}

/// High-flow volume bias in percent over the `high_flow_count` largest truth
/// values (ties broken by the earlier step). `None` when their sum is zero.
pub fn fhv(pred: &[f64], truth: &[f64], quantile: f64) -> Option<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return None;
    }
    let h = high_flow_count(truth.len(), quantile);
    let mut idx: Vec<usize> = (0..truth.len()).collect();
    idx.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]).then(a.cmp(&b)));
    let top = &idx[..h];
    let denom: f64 = top.iter().map(|&i| truth[i]).sum();
    if denom == 0.0 {
        return None;
    }
    let num: f64 = top.iter().map(|&i| pred[i] - truth[i]).sum();
    Some(100.0 * num / denom)
}

pub const FHV_QUANTILE: f64 = 0.98;

/// Skill of one reach, variable and lead time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub reach_id: usize,
    pub variable: Variable,
    /// 1-based.
    pub lead_time: usize,
    pub nse: Option<f64>,
    pub fhv: Option<f64>,
    pub n_samples: usize,
    pub excluded_reason: Option<String>,
}

/// Physical forecasts of many windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecasts {
    pub t0s: Vec<usize>,
    /// One `N x f x 3` block per window.
    pub values: Vec<Array3<f64>>,
}

impl Forecasts {
    pub fn f_horizon(&self) -> usize {
        self.values.first().map_or(0, |v| v.shape()[1])
    }

    pub fn n_reaches(&self) -> usize {
        self.values.first().map_or(0, |v| v.shape()[0])
    }

    /// Prediction and aligned truth at `reach`, `var`, lead `k` (0-based).
    pub fn series(
        &self,
        truth: &HydroSeries,
        reach: usize,
        var: Variable,
        k: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let t = truth.get(var);
        self.t0s
            .iter()
            .zip(&self.values)
            .map(|(&t0, v)| (v[[reach, k, var.index()]], t[[reach, t0 + k]]))
            .unzip()
    }
}

/// Forecasts for the windows anchored at `t0s`, de-normalized with the
/// dataset statistics. Windows run in stacks of `chunk`.
pub fn forecast(
    cfg: &GrcConfig,
    params: &GrcParams,
    ds: &Dataset,
    data: &NormalizedData,
    t0s: &[usize],
    chunk: usize,
) -> Result<Forecasts> {
    let n = ds.n_reaches();
    let mut values = Vec::with_capacity(t0s.len());
    for group in t0s.chunks(chunk.max(1)) {
        let input = BatchInput::from_windows(cfg, data, group)?;
        let out = grc::predict(cfg, params, &ds.graph, &input)?;
        for w in 0..group.len() {
            let mut block = out
                .slice(ndarray::s![w * n..(w + 1) * n, .., ..])
                .to_owned();
            for ((i, _, v), x) in block.indexed_iter_mut() {
                *x = ds.norm.denormalize(Variable::ALL[v].into(), i, *x);
            }
            values.push(block);
        }
    }
    Ok(Forecasts {
        t0s: t0s.to_vec(),
        values,
    })
}

/// NSE and FHV for every reach x variable x lead time, pooling windows.
pub fn metric_records(fc: &Forecasts, truth: &HydroSeries) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for reach in 0..fc.n_reaches() {
        for var in Variable::ALL {
            for k in 0..fc.f_horizon() {
                let (p, y) = fc.series(truth, reach, var, k);
                let nse_v = nse(&p, &y);
                let fhv_v = fhv(&p, &y, FHV_QUANTILE);
                let excluded_reason = if y.len() < 2 {
                    Some("fewer than 2 samples".to_string())
                } else if nse_v.is_none() {
                    Some("constant truth".to_string())
                } else {
                    None
                };
                out.push(MetricRecord {
                    reach_id: reach,
                    variable: var,
                    lead_time: k + 1,
                    nse: nse_v,
                    fhv: fhv_v,
                    n_samples: y.len(),
                    excluded_reason,
                });
            }
        }
    }
    out
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Per-lead-time aggregates of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeCurve {
    pub variable: Variable,
    /// Mean NSE over reaches at lead 1..f.
    pub mean_nse: Vec<Option<f64>>,
    /// Median NSE over reaches at lead 1..f.
    pub median_nse: Vec<Option<f64>>,
    pub mean_fhv: Vec<Option<f64>>,
    /// Mean over lead times of `mean_nse`.
    pub average_mean_nse: Option<f64>,
    /// Median over reaches of each reach's lead-averaged NSE.
    pub median_reach_avg_nse: Option<f64>,
    pub excluded_reaches: usize,
}

pub fn leadtime_curve(records: &[MetricRecord], var: Variable) -> LeadTimeCurve {
    let recs: Vec<&MetricRecord> = records.iter().filter(|r| r.variable == var).collect();
    let f = recs.iter().map(|r| r.lead_time).max().unwrap_or(0);
    let at = |k: usize, pick: fn(&MetricRecord) -> Option<f64>| -> Vec<f64> {
        recs.iter()
            .filter(|r| r.lead_time == k)
            .filter_map(|r| pick(r))
            .collect()
    };
    let mean_nse: Vec<Option<f64>> = (1..=f).map(|k| mean(&at(k, |r| r.nse))).collect();
    let median_nse = (1..=f).map(|k| median(&at(k, |r| r.nse))).collect();
    let mean_fhv = (1..=f).map(|k| mean(&at(k, |r| r.fhv))).collect();
    let lead_means: Vec<f64> = mean_nse.iter().flatten().copied().collect();
    let average_mean_nse = if lead_means.len() == f { mean(&lead_means) } else { None };

    let mut per_reach: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut excluded = std::collections::BTreeSet::new();
    for r in &recs {
        match r.nse {
            Some(v) => per_reach.entry(r.reach_id).or_default().push(v),
            None => {
                excluded.insert(r.reach_id);
            }
        }
    }
    let reach_avgs: Vec<f64> = per_reach
        .iter()
        .filter(|(id, v)| !excluded.contains(id) && v.len() == f)
        .filter_map(|(_, v)| mean(v))
        .collect();
    LeadTimeCurve {
        variable: var,
        mean_nse,
        median_nse,
        mean_fhv,
        average_mean_nse,
        median_reach_avg_nse: median(&reach_avgs),
        excluded_reaches: excluded.len(),
    }
}

/// Lead-averaged discharge NSE per reach over `reaches` (reaches with
/// constant truth are skipped).
pub fn reach_avg_nse(
    fc: &Forecasts,
    truth: &HydroSeries,
    var: Variable,
    reaches: &[usize],
) -> Vec<(usize, f64)> {
    reaches
        .iter()
        .filter_map(|&i| {
            let vals: Option<Vec<f64>> = (0..fc.f_horizon())
                .map(|k| {
                    let (p, y) = fc.series(truth, i, var, k);
                    nse(&p, &y)
                })
                .collect();
            vals.and_then(|v| mean(&v)).map(|m| (i, m))
        })
        .collect()
}

/// Median NSE of the lead-1 discharge forecast for spin-up lengths
/// `1..=max_spinup`. Every length uses the same anchors (windows sized for
/// `max_spinup`), so the curve isolates the effect of the lag length.
pub fn spinup_curve(
    cfg: &GrcConfig,
    params: &GrcParams,
    ds: &Dataset,
    partition: Partition,
    max_spinup: usize,
    stride: usize,
    chunk: usize,
) -> Result<Vec<(usize, Option<f64>)>> {
    if max_spinup == 0 {
        return Err(Error::invalid("max_spinup must be at least 1"));
    }
    let data = ds.normalized();
    let anchors: Vec<usize> = windows_in(ds.split.range(partition), max_spinup, cfg.f_horizon, stride)
        .iter()
        .map(|w| w.t0)
        .collect();
    if anchors.len() < 2 {
        return Err(Error::invalid(format!(
            "{partition:?} split too short for a spin-up of {max_spinup} steps"
        )));
    }
    let mut out = Vec::with_capacity(max_spinup);
    for s in 1..=max_spinup {
        let c = GrcConfig {
            h_lag: s,
            ..cfg.clone()
        };
        let fc = forecast(&c, params, ds, &data, &anchors, chunk)?;
        let per_reach: Vec<f64> = (0..ds.n_reaches())
            .filter_map(|i| {
                let (p, y) = fc.series(&ds.hydro, i, Variable::Discharge, 0);
                nse(&p, &y)
            })
            .collect();
        out.push((s, median(&per_reach)));
    }
    Ok(out)
}

/// Möbius inversion of the ablation lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennDecomposition {
    /// `f(∅)`, the MLP baseline.
    pub baseline: f64,
    /// Region value for every non-empty component set, keyed by
    /// [`Components::key`].
    pub regions: BTreeMap<String, f64>,
}

impl VennDecomposition {
    pub fn region(&self, c: Components) -> f64 {
        self.regions.get(&c.key()).copied().unwrap_or(0.0)
    }

    /// `f({c}) - f(∅)` for a single component.
    pub fn unique(&self, c: Components) -> f64 {
        self.region(c)
    }

    pub fn total(&self) -> f64 {
        self.baseline + self.regions.values().sum::<f64>()
    }
}

/// `region(S) = Σ_{T ⊆ S} (-1)^{|S \ T|} f(T)`.
pub fn venn_decompose(values: &BTreeMap<Components, f64>) -> Result<VennDecomposition> {
    let missing: Vec<String> = Components::all()
        .iter()
        .filter(|c| !values.contains_key(c))
        .map(|c| c.key())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCell(missing.join(", ")));
    }
    let baseline = values[&Components::NONE];
    let mut regions = BTreeMap::new();
    for s in Components::all() {
        if s == Components::NONE {
            continue;
        }
        let mut acc = 0.0;
        for t in Components::all() {
            if t.is_subset_of(s) {
                let sign = if (s.count() - t.count()) % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * values[&t];
            }
        }
        regions.insert(s.key(), acc);
    }
    Ok(VennDecomposition { baseline, regions })
}

/// Result of evaluating one checkpoint, stored as `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub experiment: String,
    pub cfg: GrcConfig,
    pub partition: Partition,
    pub n_windows: usize,
    pub records: Vec<MetricRecord>,
    pub curves: Vec<LeadTimeCurve>,
    pub spinup: Option<Vec<(usize, Option<f64>)>>,
}

/// Forecasts every window of `partition` (stride `stride`) and scores it.
pub fn evaluate(
    experiment: &str,
    cfg: &GrcConfig,
    params: &GrcParams,
    ds: &Dataset,
    partition: Partition,
    stride: usize,
    chunk: usize,
) -> Result<EvalResult> {
    let data = ds.normalized();
    let t0s: Vec<usize> = windows_in(ds.split.range(partition), cfg.h_lag, cfg.f_horizon, stride)
        .iter()
        .map(|w| w.t0)
        .collect();
    if t0s.len() < 2 {
        return Err(Error::invalid(format!(
            "{partition:?} split yields {} windows; at least 2 are needed",
            t0s.len()
        )));
    }
    let fc = forecast(cfg, params, ds, &data, &t0s, chunk)?;
    let records = metric_records(&fc, &ds.hydro);
    let curves = Variable::ALL
        .iter()
        .map(|&v| leadtime_curve(&records, v))
        .collect();
    Ok(EvalResult {
        experiment: experiment.to_string(),
        cfg: cfg.clone(),
        partition,
        n_windows: t0s.len(),
        records,
        curves,
        spinup: None,
    })
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// `metrics.csv` body, one row per record in reach / variable / lead order.
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("reach_id,variable,lead_time,nse,fhv,n_samples,excluded_reason\n");
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.reach_id, r.variable, r.lead_time));
    for r in sorted {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.reach_id,
            r.variable.name(),
            r.lead_time,
            fmt_opt(r.nse),
            fmt_opt(r.fhv),
            r.n_samples,
            r.excluded_reason.as_deref().unwrap_or("")
        );
    }
    s
}

/// Aggregates of one experiment in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub cfg: GrcConfig,
    pub partition: Partition,
    pub n_windows: usize,
    pub n_records: usize,
    pub n_excluded: usize,
    /// Mean and median NSE / FHV over all non-excluded records, per variable.
    pub mean_nse: BTreeMap<String, Option<f64>>,
    pub median_nse: BTreeMap<String, Option<f64>>,
    pub mean_fhv: BTreeMap<String, Option<f64>>,
    pub curves: Vec<LeadTimeCurve>,
    pub spinup: Option<Vec<(usize, Option<f64>)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiments: BTreeMap<String, ExperimentSummary>,
    /// Lead-averaged mean discharge NSE of each ablation cell, when the run
    /// contains the full lattice.
    pub ablation_matrix: Option<BTreeMap<String, f64>>,
    pub venn: Option<VennDecomposition>,
}

pub fn summarize(result: &EvalResult) -> ExperimentSummary {
    let mut mean_nse = BTreeMap::new();
    let mut median_nse = BTreeMap::new();
    let mut mean_fhv = BTreeMap::new();
    for var in Variable::ALL {
        let recs: Vec<&MetricRecord> = result
            .records
            .iter()
            .filter(|r| r.variable == var && r.excluded_reason.is_none())
            .collect();
        let nses: Vec<f64> = recs.iter().filter_map(|r| r.nse).collect();
        let fhvs: Vec<f64> = recs.iter().filter_map(|r| r.fhv).collect();
        mean_nse.insert(var.name().to_string(), mean(&nses));
        median_nse.insert(var.name().to_string(), median(&nses));
        mean_fhv.insert(var.name().to_string(), mean(&fhvs));
    }
    ExperimentSummary {
        cfg: result.cfg.clone(),
        partition: result.partition,
        n_windows: result.n_windows,
        n_records: result.records.len(),
        n_excluded: result
            .records
            .iter()
            .filter(|r| r.excluded_reason.is_some())
            .count(),
        mean_nse,
        median_nse,
        mean_fhv,
        curves: result.curves.clone(),
        spinup: result.spinup.clone(),
    }
}

fn find_eval_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_context(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_context(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_eval_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "eval.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Collects every `eval.json` under `run_dir`, writes `metrics.csv` next to
/// each and `summary.json` at the top. If the run holds all eight ablation
/// cells of one mode, the matrix and its Venn regions are added.
pub fn report(run_dir: &Path) -> Result<Summary> {
    let mut files = Vec::new();
    find_eval_files(run_dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no eval.json found under {}",
            run_dir.display()
        )));
    }
    let mut experiments = BTreeMap::new();
    let mut cells: BTreeMap<Components, f64> = BTreeMap::new();
    for path in &files {
        let text = fs::read_to_string(path).map_err(|e| io_context(path, e))?;
        let result: EvalResult = serde_json::from_str(&text)?;
        let dir = path.parent().expect("file has a parent");
        let csv = dir.join("metrics.csv");
        fs::write(&csv, metrics_csv(&result.records)).map_err(|e| io_context(&csv, e))?;
        let summary = summarize(&result);
        let rel = dir
            .strip_prefix(run_dir)
            .ok()
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| result.experiment.clone());
        if let Some(v) = summary
            .curves
            .iter()
            .find(|c| c.variable == Variable::Discharge)
            .and_then(|c| c.average_mean_nse)
        {
            cells.insert(result.cfg.components(), v);
        }
        experiments.insert(rel, summary);
    }
    let (ablation_matrix, venn) = if cells.len() == 8 {
        let venn = venn_decompose(&cells)?;
        let matrix = cells.iter().map(|(c, v)| (c.key(), *v)).collect();
        (Some(matrix), Some(venn))
    } else {
        (None, None)
    };
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        experiments,
        ablation_matrix,
        venn,
    };
    let path = run_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| io_context(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn nse_fixtures() {
        let y = [1.0, 4.0, 2.0, 8.0];
        close(nse(&y, &y).unwrap(), 1.0);
        close(nse(&[3.75; 4], &y).unwrap(), 0.0);
        close(nse(&[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0);
        assert_eq!(nse(&[1.0, 2.0], &[3.0, 3.0]), None);
        assert_eq!(nse(&[1.0], &[1.0]), None);
    }

    #[test]
    fn fhv_fixtures() {
        let y: Vec<f64> = (1..=100).map(f64::from).collect();
        close(fhv(&y, &y, FHV_QUANTILE).unwrap(), 0.0);
        let scaled: Vec<f64> = y.iter().map(|v| 0.9 * v).collect();
        close(fhv(&scaled, &y, FHV_QUANTILE).unwrap(), -10.0);
        let mut halved = y.clone();
        halved[98] /= 2.0;
        halved[99] /= 2.0;
        close(fhv(&halved, &y, FHV_QUANTILE).unwrap(), -50.0);
        assert_eq!(fhv(&[1.0, 2.0], &[0.0, 0.0], FHV_QUANTILE), None);
    }

    #[test]
    fn high_flow_count_ignores_rounding_noise() {
        assert_eq!(high_flow_count(100, 0.98), 2);
        assert_eq!(high_flow_count(101, 0.98), 3);
        assert_eq!(high_flow_count(10, 0.98), 1);
        assert_eq!(high_flow_count(350, 0.98), 7);
    }

    #[test]
    fn fhv_ties_go_to_the_earliest_step() {
        let truth = [5.0, 1.0, 5.0, 5.0];
        let pred = [6.0, 1.0, 0.0, 0.0];
        // H = 1: the first 5.0 is chosen.
        close(fhv(&pred, &truth, 0.98).unwrap(), 20.0);
    }

    #[test]
    fn metric_invariances() {
        let y = [2.0, 3.5, 1.0, 7.0, 4.0, 6.5];
        let p = [2.5, 3.0, 1.5, 6.0, 4.5, 6.0];
        let shift = |v: &[f64]| v.iter().map(|x| x + 10.0).collect::<Vec<_>>();
        close(nse(&shift(&p), &shift(&y)).unwrap(), nse(&p, &y).unwrap());
        let scale = |v: &[f64]| v.iter().map(|x| 3.0 * x).collect::<Vec<_>>();
        assert!((fhv(&scale(&p), &scale(&y), 0.5).unwrap() - fhv(&p, &y, 0.5).unwrap()).abs() < 1e-12);
    }

    fn fixture(noise: impl Fn(usize, usize) -> f64) -> (Forecasts, HydroSeries) {
        let (n, t, f) = (2, 60, 7);
        let mut truth = HydroSeries::zeros(n, t);
        for var in Variable::ALL {
            for ((i, s), v) in truth.get_mut(var).indexed_iter_mut() {
                *v = 10.0 + (s as f64 * 0.4 + i as f64).sin() * (1.0 + var.index() as f64);
            }
        }
        let t0s: Vec<usize> = (0..t - f).collect();
        let values = t0s
            .iter()
            .map(|&t0| {
                Array3::from_shape_fn((n, f, 3), |(i, k, v)| {
                    truth.get(Variable::ALL[v])[[i, t0 + k]] + noise(t0, k)
                })
            })
            .collect();
        (Forecasts { t0s, values }, truth)
    }

    #[test]
    fn perfect_forecasts_give_a_flat_curve() {
        let (fc, truth) = fixture(|_, _| 0.0);
        let recs = metric_records(&fc, &truth);
        assert_eq!(recs.len(), 2 * 3 * 7);
        let c = leadtime_curve(&recs, Variable::Discharge);
        assert!(c.mean_nse.iter().all(|v| *v == Some(1.0)));
        assert_eq!(c.average_mean_nse, Some(1.0));
    }

    #[test]
    fn noise_growing_with_lead_gives_decreasing_skill() {
        let (fc, truth) = fixture(|t0, k| 0.1 * (k + 1) as f64 * if t0 % 2 == 0 { 1.0 } else { -1.0 });
        let c = leadtime_curve(&metric_records(&fc, &truth), Variable::Discharge);
        let v: Vec<f64> = c.mean_nse.iter().map(|x| x.unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
    }

    #[test]
    fn mean_of_equal_values() {
        close(mean(&[0.7; 7]).unwrap(), 0.7);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    fn lattice(v: [f64; 8]) -> BTreeMap<Components, f64> {
        // Order: (stat, temp, topo) rows as in the ablation tables, full first.
        let rows = [
            (true, true, true),
            (true, true, false),
            (true, false, true),
            (true, false, false),
            (false, true, true),
            (false, true, false),
            (false, false, true),
            (false, false, false),
        ];
        rows.iter()
            .zip(v)
            .map(|(&(stat, temp, topo), x)| (Components { stat, temp, topo }, x))
            .collect()
    }

    #[test]
    fn venn_of_equal_values_is_zero() {
        let d = venn_decompose(&lattice([0.5; 8])).unwrap();
        assert!(d.regions.values().all(|&r| r == 0.0));
        assert_eq!(d.regions.len(), 7);
    }

    #[test]
    fn venn_regions_sum_to_full_minus_baseline() {
        let vals = [0.93, 0.89, 0.89, 0.83, 0.91, 0.87, 0.80, 0.74];
        let d = venn_decompose(&lattice(vals)).unwrap();
        let sum: f64 = d.regions.values().sum();
        close(sum, 0.93 - 0.74);
        close(d.total(), 0.93);
    }

    #[test]
    fn venn_unique_gains_of_the_hotstart_table() {
        let d = venn_decompose(&lattice([0.93, 0.89, 0.89, 0.83, 0.91, 0.87, 0.80, 0.74])).unwrap();
        let temp = Components { stat: false, temp: true, topo: false };
        let topo = Components { stat: false, temp: false, topo: true };
        assert!((d.unique(temp) - 0.13).abs() <= 0.01 + 1e-12);
        assert!((d.unique(topo) - 0.06).abs() <= 0.01 + 1e-12);
    }

    #[test]
    fn venn_unique_topology_of_the_coldstart_table() {
        let d = venn_decompose(&lattice([0.82, 0.69, 0.79, 0.66, 0.74, 0.59, 0.70, 0.58])).unwrap();
        let topo = Components { stat: false, temp: false, topo: true };
        let temp = Components { stat: false, temp: true, topo: false };
        close(d.unique(topo), 0.12);
        assert!((d.unique(topo) - 0.11).abs() <= 0.01 + 1e-12);
        assert!(d.unique(topo) > d.unique(temp));
    }

    #[test]
    fn venn_reports_missing_cells() {
        let mut m = lattice([0.5; 8]);
        m.remove(&Components { stat: true, temp: false, topo: true });
        match venn_decompose(&m) {
            Err(Error::MissingCell(s)) => assert_eq!(s, "stat+topo"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn write_eval(dir: &Path, name: &str) -> EvalResult {
        let (fc, truth) = fixture(|t0, k| 0.05 * ((t0 * 7 + k) % 5) as f64);
        let records = metric_records(&fc, &truth);
        let curves = Variable::ALL.iter().map(|&v| leadtime_curve(&records, v)).collect();
        let r = EvalResult {
            experiment: name.into(),
            cfg: GrcConfig::new(crate::grc::Mode::ColdStart),
            partition: Partition::Test,
            n_windows: fc.t0s.len(),
            records,
            curves,
            spinup: None,
        };
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("eval.json"), serde_json::to_string(&r).unwrap()).unwrap();
        r
    }

    #[test]
    fn report_is_reproducible_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_eval(dir.path(), "base");
        report(dir.path()).unwrap();
        let csv1 = fs::read(dir.path().join("metrics.csv")).unwrap();
        let sum1 = fs::read(dir.path().join("summary.json")).unwrap();
        let summary = report(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("metrics.csv")).unwrap(), csv1);
        assert_eq!(fs::read(dir.path().join("summary.json")).unwrap(), sum1);

        let text = String::from_utf8(csv1).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 2 * 3 * 7);
        let nses: Vec<f64> = rows
            .iter()
            .filter(|l| l.split(',').nth(1) == Some("discharge"))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        let exp = &summary.experiments["base"];
        let m = exp.mean_nse["discharge"].unwrap();
        assert!((m - nses.iter().sum::<f64>() / nses.len() as f64).abs() <= 1e-12);
        assert_eq!(exp.n_records, r.records.len());
    }
}
