use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grc_core::eval::{self, EvalResult};
use grc_core::grc::{init_params, Checkpoint, Components};
use grc_core::network::{self, sample_gauges, split_gauges, GaugeSet};
use grc_core::oracle::OraclePhysics;
use grc_core::pipeline::{self, DataGenConfig, Dataset, SplitSpec};
use grc_core::training::{self, CellOutcome, FinetuneConfig, SweepConfig};
use serde::Serialize;

use crate::args::*;
use crate::manifest::{self, now_unix, sha256_file};
use crate::Invalid;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenNetwork(a) => gen_network(&a),
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Eval(a) => evaluate(&a),
        Command::Report(a) => report(&a),
    }
}

/// Refuses to write into a non-empty directory unless `overwrite`.
fn prepare_out(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.is_file() {
        bail!(Invalid(format!("output {} is a file", dir.display())));
    }
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            bail!(Invalid(format!(
                "output directory {} is not empty; pass --overwrite to replace its artifacts",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(Invalid(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    require(dir, "dataset directory")?;
    require(&dir.join("manifest.json"), "dataset manifest")?;
    pipeline::read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    require(dir, "checkpoint directory")?;
    require(&dir.join("params.json"), "checkpoint manifest")?;
    Checkpoint::read(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn graph_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("graph.json")
    } else {
        p.to_path_buf()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn gen_network(a: &GenNetworkArgs) -> Result<()> {
    let started = now_unix();
    prepare_out(&a.out, a.common.overwrite)?;
    let (g, feats) = match &a.from {
        Some(src) => {
            let path = graph_file(src);
            require(&path, "network file")?;
            network::read_graph(&path)?
        }
        None => network::generate_network(a.reaches, a.branching, a.common.seed)?,
    };
    match a.refine {
        Some(k) => {
            let (fine, fine_feats, map) = network::refine_network(&g, &feats, k)?;
            network::write_graph(&a.out.join("graph.json"), &fine, &fine_feats)?;
            network::write_coarse_to_fine(&a.out.join("coarse_to_fine.json"), &map)?;
            log::info!("refined {} reaches into {}", g.n_reaches(), fine.n_reaches());
        }
        None => network::write_graph(&a.out.join("graph.json"), &g, &feats)?,
    }
    let inputs: Vec<&Path> = a.from.iter().map(|p| p.as_path()).collect();
    manifest::write(&a.out, "gen-network", a, a.common.seed, &inputs, started)
}

fn split_for(a: &GenDataArgs) -> Result<SplitSpec> {
    let seventh = a.steps / 7;
    let val = a.val.unwrap_or(seventh);
    let test = a.test.unwrap_or(seventh);
    let train = match a.train {
        Some(t) => t,
        None => a
            .steps
            .checked_sub(val + test)
            .ok_or_else(|| Invalid(format!("{} steps cannot hold val {val} + test {test}", a.steps)))?,
    };
    if train + val + test != a.steps {
        bail!(Invalid(format!(
            "train {train} + val {val} + test {test} must equal --steps {}",
            a.steps
        )));
    }
    Ok(SplitSpec::from_lengths(train, val, test))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let started = now_unix();
    let physics = OraclePhysics {
        manning_scale: a.manning_scale,
        runoff_bias: a.runoff_bias,
        ..OraclePhysics::default()
    };
    let mut inputs: Vec<&Path> = Vec::new();
    let ds = if let Some(src) = &a.perturb {
        let base = load_dataset(src)?;
        prepare_out(&a.out, a.common.overwrite)?;
        inputs.push(src);
        let hydro = pipeline::reroute(&base, &physics)?;
        let mut obs = base.with_hydro(hydro)?;
        if let Some(g) = &mut obs.generator {
            g.physics = physics;
        }
        obs
    } else {
        let split = split_for(a)?;
        let cfg = DataGenConfig {
            n_reaches: a.reaches,
            branching_prob: a.branching,
            n_steps: a.steps,
            spinup_steps: a.spinup,
            regime: a.regime,
            physics,
            seed: a.common.seed,
            ..DataGenConfig::default()
        };
        match &a.graph {
            Some(src) => {
                let path = graph_file(src);
                require(&path, "network file")?;
                prepare_out(&a.out, a.common.overwrite)?;
                inputs.push(src);
                let (g, feats) = network::read_graph(&path)?;
                pipeline::generate_dataset_on(g, feats, &cfg, split, a.dtype)?
            }
            None => {
                prepare_out(&a.out, a.common.overwrite)?;
                pipeline::generate_dataset(&cfg, split, a.dtype)?
            }
        }
    };
    pipeline::write_dataset(&a.out, &ds)?;
    log::info!(
        "wrote {} reaches x {} steps to {}",
        ds.n_reaches(),
        ds.n_steps(),
        a.out.display()
    );
    manifest::write(&a.out, "gen-data", a, a.common.seed, &inputs, started)
}

fn save_checkpoint(dir: &Path, mut ckpt: Checkpoint, data: &Path, log_csv: &str) -> Result<()> {
    ckpt.norm_ref = Some(format!("sha256:{}", sha256_file(&data.join("norm.json"))?));
    ckpt.write(dir)?;
    write_text(&dir.join("train_log.csv"), log_csv)
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let started = now_unix();
    let comps = Components::parse_key(&a.components)?;
    let cfg = a.model.config().with_components(comps);
    cfg.validate()?;
    let tc = a.train.config(&a.common);
    tc.validate()?;
    let ds = load_dataset(&a.data)?;
    prepare_out(&a.out, a.common.overwrite)?;
    let (ckpt, log) = training::pretrain(&cfg, &tc, &ds)?;
    log::info!(
        "best epoch {} of {}, val loss {:.5}",
        log.best_epoch,
        log.epochs.len(),
        log.best_val_loss
    );
    save_checkpoint(&a.out, ckpt, &a.data, &log.to_csv())?;
    manifest::write(&a.out, "pretrain", a, a.common.seed, &[&a.data], started)
}

fn write_eval(dir: &Path, result: &EvalResult) -> Result<()> {
    write_json(&dir.join("eval.json"), result)?;
    write_text(&dir.join("metrics.csv"), &eval::metrics_csv(&result.records))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let started = now_unix();
    let base = a.model.config();
    base.validate()?;
    let tc = a.train.config(&a.common);
    tc.validate()?;
    let ds = load_dataset(&a.data)?;
    prepare_out(&a.out, a.common.overwrite)?;
    let cells = training::run_ablation_matrix(&base, &tc, &ds);
    let mut csv = String::from("key,stat,temp,topo,status,best_epoch,best_val_loss,test_mean_nse,test_median_nse\n");
    let mut failed = Vec::new();
    for (c, outcome) in cells {
        let key = c.key();
        match outcome {
            CellOutcome::Trained(ckpt, log) => {
                let dir = a.out.join(&key);
                fs::create_dir_all(&dir)?;
                let result = eval::evaluate(
                    &key,
                    &ckpt.cfg,
                    &ckpt.params,
                    &ds,
                    pipeline::Partition::Test,
                    a.eval.eval_stride,
                    a.eval.chunk,
                )?;
                save_checkpoint(&dir, ckpt, &a.data, &log.to_csv())?;
                write_eval(&dir, &result)?;
                let q = result
                    .curves
                    .iter()
                    .find(|c| c.variable == grc_core::Variable::Discharge)
                    .expect("discharge curve");
                let _ = writeln!(
                    csv,
                    "{key},{},{},{},trained,{},{:.6},{},{}",
                    c.stat as u8,
                    c.temp as u8,
                    c.topo as u8,
                    log.best_epoch,
                    log.best_val_loss,
                    fmt_opt(q.average_mean_nse),
                    fmt_opt(q.median_reach_avg_nse)
                );
            }
            CellOutcome::Failed(msg) => {
                log::warn!("cell {key} failed: {msg}");
                let _ = writeln!(csv, "{key},{},{},{},failed,,,,", c.stat as u8, c.temp as u8, c.topo as u8);
                failed.push(key);
            }
        }
    }
    write_text(&a.out.join("ablation_matrix.csv"), &csv)?;
    if failed.is_empty() {
        eval::report(&a.out)?;
    }
    manifest::write(&a.out, "ablate", a, a.common.seed, &[&a.data], started)?;
    if !failed.is_empty() {
        bail!("ablation cells failed: {}", failed.join(", "));
    }
    Ok(())
}

fn gauge_set(obs: &Dataset, g: &GaugeArgs, seed: u64) -> Result<GaugeSet> {
    if let Some(list) = &g.gauges {
        let mut supervised = list.clone();
        supervised.sort_unstable();
        supervised.dedup();
        return Ok(GaugeSet {
            ratio_permille: 1000,
            supervised,
            unsupervised: Vec::new(),
        });
    }
    let candidates = sample_gauges(&obs.graph, g.candidates, seed)?;
    Ok(split_gauges(&obs.graph, &candidates, &[g.ratio], seed)?.remove(0))
}

#[derive(Serialize)]
struct FinetuneScores {
    gauges: GaugeSet,
    before: training::GaugeScores,
    after: training::GaugeScores,
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let started = now_unix();
    let tc = a.train.config(&a.common);
    tc.validate()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let obs = load_dataset(&a.obs)?;
    let set = gauge_set(&obs, &a.gauges, a.common.seed)?;
    prepare_out(&a.out, a.common.overwrite)?;
    let (start, ft) = if a.scratch {
        let fresh = Checkpoint {
            params: init_params(&ckpt.cfg, a.common.seed)?,
            seed: a.common.seed,
            ..ckpt.clone()
        };
        (fresh, None)
    } else {
        let ft = FinetuneConfig::standard(&ckpt.cfg, a.base_lr);
        (ckpt, Some(ft))
    };
    let (tuned, log) = training::finetune(&start, ft.as_ref(), &tc, &obs, &set.supervised)?;
    let score = |p| {
        training::gauge_scores(&tuned.cfg, p, &obs, &set, a.eval.eval_stride, a.eval.chunk)
    };
    let scores = FinetuneScores {
        before: score(&start.params)?,
        after: score(&tuned.params)?,
        gauges: set.clone(),
    };
    log::info!(
        "unsupervised median NSE {} -> {}",
        fmt_opt(scores.before.unsupervised),
        fmt_opt(scores.after.unsupervised)
    );
    save_checkpoint(&a.out, tuned, &a.obs, &log.to_csv())?;
    write_json(&a.out.join("scores.json"), &scores)?;
    if let Some(ft) = &ft {
        write_json(&a.out.join("finetune.json"), ft)?;
    }
    manifest::write(&a.out, "finetune", a, a.common.seed, &[&a.ckpt, &a.obs], started)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let started = now_unix();
    let tc = a.train.config(&a.common);
    tc.validate()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let obs = load_dataset(&a.obs)?;
    let candidates = sample_gauges(&obs.graph, a.candidates, a.common.seed)?;
    let sets = split_gauges(&obs.graph, &candidates, &a.ratios, a.common.seed)?;
    prepare_out(&a.out, a.common.overwrite)?;
    let cfg = SweepConfig {
        ft: FinetuneConfig::standard(&ckpt.cfg, a.base_lr),
        tc: tc.clone(),
        scratch: a.scratch.then(|| tc.clone()),
        eval_stride: a.eval.eval_stride,
        chunk: a.eval.chunk,
    };
    let rows = training::finetune_ratio_sweep(&ckpt, &obs, &sets, &cfg)?;
    let mut csv = String::from(
        "ratio,n_supervised,n_unsupervised,pretrained_unsupervised,pretrained_all,\
         finetuned_supervised,finetuned_unsupervised,finetuned_all,\
         scratch_supervised,scratch_unsupervised,scratch_all\n",
    );
    for r in &rows {
        let s = r.scratch.as_ref();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.ratio,
            r.supervised.len(),
            r.unsupervised.len(),
            fmt_opt(r.pretrained.unsupervised),
            fmt_opt(r.pretrained.all),
            fmt_opt(r.finetuned.supervised),
            fmt_opt(r.finetuned.unsupervised),
            fmt_opt(r.finetuned.all),
            fmt_opt(s.and_then(|s| s.supervised)),
            fmt_opt(s.and_then(|s| s.unsupervised)),
            fmt_opt(s.and_then(|s| s.all)),
        );
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    write_json(&a.out.join("sweep.json"), &rows)?;
    manifest::write(&a.out, "sweep", a, a.common.seed, &[&a.ckpt, &a.obs], started)
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let started = now_unix();
    let ckpt = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    prepare_out(&a.out, a.common.overwrite)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.ckpt
            .file_name()
            .map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let mut result = eval::evaluate(
        &name,
        &ckpt.cfg,
        &ckpt.params,
        &ds,
        a.partition,
        a.eval.eval_stride,
        a.eval.chunk,
    )?;
    if let Some(max) = a.spinup_max {
        result.spinup = Some(eval::spinup_curve(
            &ckpt.cfg,
            &ckpt.params,
            &ds,
            a.partition,
            max,
            a.eval.eval_stride,
            a.eval.chunk,
        )?);
    }
    if let Some(c) = result.curves.iter().find(|c| c.variable == grc_core::Variable::Discharge) {
        log::info!("median reach-averaged discharge NSE {}", fmt_opt(c.median_reach_avg_nse));
    }
    write_eval(&a.out, &result)?;
    manifest::write(&a.out, "eval", a, a.common.seed, &[&a.ckpt, &a.data], started)
}

fn report(a: &ReportArgs) -> Result<()> {
    require(&a.run, "run directory")?;
    let summary = eval::report(&a.run)?;
    for (name, exp) in &summary.experiments {
        let q = exp.mean_nse.get("discharge").copied().flatten();
        println!("{name}\tmean discharge NSE {}", fmt_opt(q));
    }
    if let Some(v) = &summary.venn {
        for (region, gain) in &v.regions {
            println!("venn {region}\t{gain:+.4}");
        }
    }
    Ok(())
}
