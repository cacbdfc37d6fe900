//! Acceptance run: one PASS/FAIL line per criterion. Failures are reported
//! but only fail the process when `GRC_ACCEPTANCE_STRICT` is set. Trained
//! models are shared between criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use grc_core::autodiff::Tape;
use grc_core::eval::{self, fhv, nse, spinup_curve, venn_decompose, EvalResult, FHV_QUANTILE};
use grc_core::grc::{bind, init_params, predict, unroll, BatchInput, Checkpoint, Components, GrcConfig, GrcParams, Mode};
use grc_core::network::{generate_network, refine_network, sample_gauges, split_gauges};
use grc_core::oracle::{mass_balance, route_with, synthesize_runoff, OraclePhysics, Regime, RouteConfig};
use grc_core::pipeline::{generate_dataset, generate_dataset_on, reroute, DataGenConfig, Dataset, Dtype, Partition, SplitSpec};
use grc_core::training::{finetune, finetune_ratio_sweep, gauge_scores, pretrain, FinetuneConfig, SweepConfig, TrainConfig};
use grc_core::Variable;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 7;
const GAUGE_SEED: u64 = 11;
/// Channel roughness multiplier of the "observation" oracle.
const OBS_MANNING_SCALE: f64 = 1.3;
/// Width of the models in the multi-model experiments.
const DESK_DIM: usize = 32;
const EVAL_CHUNK: usize = 8;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn label(c: Components) -> &'static str {
    match (c.stat, c.temp, c.topo) {
        (true, true, true) => "full",
        (true, true, false) => "no-topo",
        (true, false, true) => "no-temp",
        _ => "cell",
    }
}

/// A trained model and its test-split evaluation (eval stride 1).
struct Trained {
    ckpt: Checkpoint,
    eval: EvalResult,
}

impl Trained {
    fn discharge(&self) -> &eval::LeadTimeCurve {
        self.eval
            .curves
            .iter()
            .find(|c| c.variable == Variable::Discharge)
            .expect("discharge curve")
    }

    /// Reach-mean NSE averaged over lead times, as in the ablation tables.
    fn score(&self) -> f64 {
        self.discharge().average_mean_nse.expect("scored reaches")
    }
}

struct Lab {
    ds: Dataset,
    models: BTreeMap<(String, u8, u64), Trained>,
}

impl Lab {
    fn new() -> Self {
        let gen = DataGenConfig { seed: DATA_SEED, ..DataGenConfig::default() };
        let ds = generate_dataset(&gen, SplitSpec::from_lengths(2000, 400, 400), Dtype::Float32)
            .expect("desk dataset");
        Lab { ds, models: BTreeMap::new() }
    }

    fn desk_cfg(mode: Mode, c: Components) -> GrcConfig {
        GrcConfig { d_fusion: DESK_DIM, d_hidden: DESK_DIM, ..GrcConfig::new(mode) }.with_components(c)
    }

    /// Equal compute per cell: HotStart windows are about half as long.
    fn desk_tc(mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: if mode == Mode::HotStart { 12 } else { 8 },
            windows_per_epoch: Some(160),
            val_stride: 10,
            seed,
            ..TrainConfig::default()
        }
    }

    fn desk(&mut self, mode: Mode, c: Components, seed: u64) -> &Trained {
        let key = (mode.name().to_string(), c.bits(), seed);
        if !self.models.contains_key(&key) {
            let t = Instant::now();
            let cfg = Self::desk_cfg(mode, c);
            let (ckpt, _) = pretrain(&cfg, &Self::desk_tc(mode, seed), &self.ds).expect("desk training");
            let eval = eval::evaluate(&c.key(), &cfg, &ckpt.params, &self.ds, Partition::Test, 1, EVAL_CHUNK)
                .expect("desk evaluation");
            let trained = Trained { ckpt, eval };
            println!(
                "    trained {} {:<15} seed {seed}: NSE {:.4} ({:.0}s)",
                mode.name(),
                c.key(),
                trained.score(),
                t.elapsed().as_secs_f64()
            );
            self.models.insert(key.clone(), trained);
        }
        &self.models[&key]
    }
}

fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gradient_fidelity() -> Verdict {
    let (g, _) = generate_network(5, 0.5, 3).expect("network");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = (0.0, String::new());
    for mode in [Mode::ColdStart, Mode::HotStart] {
        let cfg = GrcConfig { h_lag: 3, f_horizon: 3, d_fusion: 6, d_hidden: 5, ..GrcConfig::new(mode) };
        let mut params = init_params(&cfg, 9).expect("init");
        for t in &mut params.tensors {
            t.value.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
        }
        let mut rand = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0));
        let input = BatchInput {
            n_windows: 1,
            statics: rand(5, cfg.d_static),
            runoff: (0..6).map(|_| rand(5, 1)).collect(),
            states: (mode == Mode::HotStart).then(|| (0..3).map(|_| rand(5, 3)).collect()),
        };
        let targets: Vec<Array2<f64>> = (0..3).map(|_| rand(5, 3)).collect();
        let loss_of = |p: &GrcParams| -> f64 {
            let y = predict(&cfg, p, &g, &input).expect("predict");
            (0..3)
                .map(|k| {
                    let d = &y.index_axis(ndarray::Axis(1), k) - &targets[k];
                    d.iter().map(|v| v * v).sum::<f64>()
                })
                .sum()
        };
        let tape = Tape::new();
        let bound = bind(&tape, &cfg, &params, |_| true).expect("bind");
        let adj = grc_core::grc::batch_adjacency(&cfg, &g, 1);
        let preds = unroll(&tape, &cfg, &bound, adj.as_ref(), &input).expect("unroll");
        let mut loss = None;
        for (p, t) in preds.iter().zip(&targets) {
            let sq = p.sub(&tape.constant(t.clone())).expect("sub").sum_squares();
            loss = Some(match loss {
                None => sq,
                Some(acc) => sq.add(&acc).expect("add"),
            });
        }
        let grads = tape.backward_params(loss.expect("loss")).expect("backward");
        let eps = 1e-6;
        for (k, tensor) in params.tensors.iter().enumerate() {
            let mut fd = Array2::zeros(tensor.value.dim());
            for idx in 0..tensor.value.len() {
                let (i, j) = (idx / tensor.value.ncols(), idx % tensor.value.ncols());
                let mut plus = params.clone();
                plus.tensors[k].value[[i, j]] += eps;
                let mut minus = params.clone();
                minus.tensors[k].value[[i, j]] -= eps;
                fd[[i, j]] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            }
            let analytic = grads.get(&k).cloned().unwrap_or_else(|| Array2::zeros(fd.dim()));
            let err = relative_error(&analytic, &fd);
            if err >= worst.0 || worst.1.is_empty() {
                worst = (err, format!("{} {}.{}", mode.name(), tensor.layer, tensor.name));
            }
        }
    }
    verdict(worst.0 <= 1e-4, format!("worst relative error {:.2e} ({})", worst.0, worst.1))
}

fn oracle_conservation() -> Verdict {
    let t = Instant::now();
    let (g, f) = generate_network(200, 0.3, DATA_SEED).expect("network");
    let forcing = synthesize_runoff(&g, &f, 3650, DATA_SEED, Regime::Humid).expect("runoff");
    let physics = OraclePhysics::default();
    let routed = route_with(&g, &f, &forcing, &physics, None, &RouteConfig::default()).expect("route");
    let worst = mass_balance(&g, &forcing, &physics, None, &routed.series)
        .iter()
        .map(|m| m.relative())
        .fold(0.0, f64::max);
    let s = &routed.series;
    let nonneg = s.discharge.iter().chain(&s.depth).chain(&s.storage).all(|v| *v >= 0.0);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-8 && nonneg && secs < 60.0,
        format!("max residual {worst:.2e}, nonnegative {nonneg}, {secs:.1}s"),
    )
}

fn metric_exactness() -> Verdict {
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-12);
    let y: Vec<f64> = (1..=100).map(f64::from).collect();
    let mut halved = y.clone();
    halved[98] /= 2.0;
    halved[99] /= 2.0;
    let mean = y.iter().sum::<f64>() / 100.0;
    let cases = [
        ("nse perfect", close(nse(&y, &y), 1.0)),
        ("nse mean", close(nse(&vec![mean; 100], &y), 0.0)),
        ("nse hand", close(nse(&[1.0, 2.0, 5.0], &[1.0, 2.0, 3.0]), -1.0)),
        ("nse constant truth", nse(&[1.0, 2.0], &[4.0, 4.0]).is_none()),
        ("fhv perfect", close(fhv(&y, &y, FHV_QUANTILE), 0.0)),
        ("fhv scaled", close(fhv(&y.iter().map(|v| 0.9 * v).collect::<Vec<_>>(), &y, FHV_QUANTILE), -10.0)),
        ("fhv halved peaks", close(fhv(&halved, &y, FHV_QUANTILE), -50.0)),
    ];
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(failed.is_empty(), if failed.is_empty() { "7 fixtures".to_string() } else { format!("failed: {failed:?}") })
}

fn pretraining_skill(lab: &Lab, full: &mut Option<Trained>) -> Verdict {
    let t = Instant::now();
    let cfg = GrcConfig::new(Mode::ColdStart);
    let tc = TrainConfig { epochs: 8, windows_per_epoch: Some(160), val_stride: 10, ..TrainConfig::default() };
    let (ckpt, log) = pretrain(&cfg, &tc, &lab.ds).expect("pretrain");
    let ev = eval::evaluate("full", &cfg, &ckpt.params, &lab.ds, Partition::Test, 1, EVAL_CHUNK).expect("eval");
    let trained = Trained { ckpt, eval: ev };
    let med = trained.discharge().median_reach_avg_nse.unwrap_or(f64::NEG_INFINITY);
    let secs = t.elapsed().as_secs_f64();
    *full = Some(trained);
    verdict(
        med >= 0.75 && secs <= 1800.0,
        format!("median NSE {med:.4} (best epoch {}/{}), {secs:.0}s", log.best_epoch, log.epochs.len()),
    )
}

const NO_TOPO: Components = Components { stat: true, temp: true, topo: false };
const NO_TEMP: Components = Components { stat: true, temp: false, topo: true };

fn coldstart_hierarchy(lab: &mut Lab) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let f = lab.desk(Mode::ColdStart, Components::FULL, seed).score();
        let no_topo = lab.desk(Mode::ColdStart, NO_TOPO, seed).score();
        let no_temp = lab.desk(Mode::ColdStart, NO_TEMP, seed).score();
        let (d_topo, d_temp) = (f - no_topo, f - no_temp);
        let ok = d_topo > d_temp && d_temp > 0.0;
        wins += ok as usize;
        parts.push(format!("seed {seed}: -topo {d_topo:.3}, -temp {d_temp:.3}"));
    }
    verdict(wins >= 2, format!("{wins}/3 seeds; {}", parts.join("; ")))
}

fn matrix(lab: &mut Lab, mode: Mode) -> BTreeMap<Components, f64> {
    Components::all().into_iter().map(|c| (c, lab.desk(mode, c, 0).score())).collect()
}

const TEMP: Components = Components { stat: false, temp: true, topo: false };
const TOPO: Components = Components { stat: false, temp: false, topo: true };

fn hierarchy_inversion(lab: &mut Lab) -> Verdict {
    let hot = venn_decompose(&matrix(lab, Mode::HotStart)).expect("hotstart venn");
    let cold = venn_decompose(&matrix(lab, Mode::ColdStart)).expect("coldstart venn");
    let (ht, hp) = (hot.unique(TEMP), hot.unique(TOPO));
    let (ct, cp) = (cold.unique(TEMP), cold.unique(TOPO));
    verdict(
        ht > hp && cp > ct,
        format!("hotstart unique temp {ht:.3} vs topo {hp:.3}; coldstart unique topo {cp:.3} vs temp {ct:.3}"),
    )
}

fn curve_shapes(lab: &mut Lab, full: &Trained) -> Verdict {
    let hot = lab.desk(Mode::HotStart, Components::FULL, 0);
    let lead: Vec<f64> = hot.discharge().mean_nse.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let rises: Vec<f64> = lead.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    let lead_ok = lead.iter().all(|v| v.is_finite())
        && (rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.01));
    let spin = spinup_curve(&full.ckpt.cfg, &full.ckpt.params, &lab.ds, Partition::Test, 20, 3, EVAL_CHUNK)
        .expect("spin-up curve");
    let at = |s: usize| spin.iter().find(|(k, _)| *k == s).and_then(|(_, v)| *v).unwrap_or(f64::NAN);
    let (s3, s20) = (at(3), at(20));
    let spin_ok = s20 - s3 >= 0.02;
    let lead_txt: Vec<String> = lead.iter().map(|v| format!("{v:.3}")).collect();
    verdict(
        lead_ok && spin_ok,
        format!("hotstart lead NSE [{}]; coldstart spin-up s=3 {s3:.3}, s=20 {s20:.3}", lead_txt.join(", ")),
    )
}

fn venn_table_check() -> Verdict {
    let rows = [
        ((true, true, true), 0.93),
        ((true, true, false), 0.89),
        ((true, false, true), 0.89),
        ((true, false, false), 0.83),
        ((false, true, true), 0.91),
        ((false, true, false), 0.87),
        ((false, false, true), 0.80),
        ((false, false, false), 0.74),
    ];
    let cells = rows
        .iter()
        .map(|&((stat, temp, topo), v)| (Components { stat, temp, topo }, v))
        .collect();
    let d = venn_decompose(&cells).expect("venn");
    let (t, p) = (d.unique(TEMP), d.unique(TOPO));
    verdict(
        (t - 0.13).abs() <= 0.01 + 1e-12 && (p - 0.06).abs() <= 0.01 + 1e-12,
        format!("unique temp {t:.4}, unique topo {p:.4}"),
    )
}

fn observations(ds: &Dataset) -> Dataset {
    let physics = OraclePhysics { manning_scale: OBS_MANNING_SCALE, ..OraclePhysics::default() };
    ds.with_hydro(reroute(ds, &physics).expect("reroute")).expect("observation dataset")
}

fn finetune_tc() -> TrainConfig {
    TrainConfig { epochs: 8, windows_per_epoch: Some(160), val_stride: 10, ..TrainConfig::default() }
}

fn frozen_identical(ft: &FinetuneConfig, before: &GrcParams, after: &GrcParams) -> bool {
    before.tensors.iter().zip(&after.tensors).all(|(a, b)| {
        !ft.frozen.contains(&a.layer) || a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn finetune_transfer(lab: &mut Lab) -> Verdict {
    let obs = observations(&lab.ds);
    let candidates = sample_gauges(&obs.graph, 40, GAUGE_SEED).expect("gauges");
    let set = split_gauges(&obs.graph, &candidates, &[0.5], GAUGE_SEED).expect("split").remove(0);
    let mut gains = Vec::new();
    let mut frozen_ok = true;
    for c in [Components::FULL, NO_TOPO] {
        let ckpt = lab.desk(Mode::ColdStart, c, 0).ckpt.clone();
        let ft = FinetuneConfig::standard(&ckpt.cfg, 1e-3);
        let (tuned, _) = finetune(&ckpt, Some(&ft), &finetune_tc(), &obs, &set.supervised).expect("finetune");
        frozen_ok &= frozen_identical(&ft, &ckpt.params, &tuned.params);
        let before = gauge_scores(&ckpt.cfg, &ckpt.params, &obs, &set, 1, EVAL_CHUNK).expect("score");
        let after = gauge_scores(&ckpt.cfg, &tuned.params, &obs, &set, 1, EVAL_CHUNK).expect("score");
        let (b, a) = (before.unsupervised.unwrap_or(f64::NAN), after.unsupervised.unwrap_or(f64::NAN));
        println!("    {} unsupervised NSE {b:.4} -> {a:.4}", label(c));
        gains.push(a - b);
    }
    let (full_gain, no_topo_gain) = (gains[0], gains[1]);
    verdict(
        full_gain > 0.0 && full_gain > no_topo_gain && frozen_ok,
        format!("unsupervised gain full {full_gain:+.4}, no-topo {no_topo_gain:+.4}; frozen layers identical {frozen_ok}"),
    )
}

fn cross_scale_sweep(lab: &mut Lab) -> Verdict {
    let foundation = lab.desk(Mode::ColdStart, Components::FULL, 0).ckpt.clone();
    let (fine_g, fine_f, _) = refine_network(&lab.ds.graph, &lab.ds.feats, 2).expect("refine");
    let gen = DataGenConfig {
        seed: DATA_SEED,
        physics: OraclePhysics { manning_scale: OBS_MANNING_SCALE, ..OraclePhysics::default() },
        ..DataGenConfig::default()
    };
    let obs = generate_dataset_on(fine_g, fine_f, &gen, SplitSpec::from_lengths(2000, 400, 400), Dtype::Float32)
        .expect("refined observations");
    let candidates = sample_gauges(&obs.graph, 40, GAUGE_SEED).expect("gauges");
    let sets = split_gauges(&obs.graph, &candidates, &[0.1, 0.25], GAUGE_SEED).expect("split");
    let nested = sets.windows(2).all(|w| w[0].supervised.iter().all(|g| w[1].supervised.contains(g)))
        && sets.iter().all(|s| {
            let mut all: Vec<usize> = s.supervised.iter().chain(&s.unsupervised).copied().collect();
            all.sort_unstable();
            all == candidates
        });
    let sweep = SweepConfig {
        ft: FinetuneConfig::standard(&foundation.cfg, 1e-3),
        tc: TrainConfig { windows_per_epoch: Some(128), ..finetune_tc() },
        scratch: Some(TrainConfig { windows_per_epoch: Some(128), ..finetune_tc() }),
        eval_stride: 1,
        chunk: EVAL_CHUNK,
    };
    let rows = finetune_ratio_sweep(&foundation, &obs, &sets, &sweep).expect("sweep");
    let mut ok = nested;
    let mut parts = Vec::new();
    for r in &rows {
        let f = r.finetuned.unsupervised.unwrap_or(f64::NAN);
        let s = r.scratch.as_ref().and_then(|s| s.unsupervised).unwrap_or(f64::NAN);
        ok &= f >= s;
        parts.push(format!("{:.0}%: fine-tuned {f:.4} vs scratch {s:.4}", r.ratio * 100.0));
    }
    verdict(ok, format!("{}; nested {nested}", parts.join("; ")))
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "{} criterion {id:>2} {name}: {} [{:.0}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        t.elapsed().as_secs_f64()
    );
    v.pass
}

fn main() -> ExitCode {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
    let mut passed = Vec::new();
    passed.push(run(1, "gradient fidelity", gradient_fidelity));
    passed.push(run(2, "oracle conservation", oracle_conservation));
    passed.push(run(3, "metric exactness", metric_exactness));
    passed.push(run(8, "venn oracle check", venn_table_check));

    let mut lab = Lab::new();
    let mut full = None;
    passed.push(run(4, "desk pretraining skill", || pretraining_skill(&lab, &mut full)));
    passed.push(run(5, "coldstart ablation hierarchy", || coldstart_hierarchy(&mut lab)));
    passed.push(run(6, "hotstart hierarchy inversion", || hierarchy_inversion(&mut lab)));
    passed.push(run(7, "curve shapes", || match &full {
        Some(f) => curve_shapes(&mut lab, f),
        None => verdict(false, "no pretrained model from criterion 4"),
    }));
    passed.push(run(9, "fine-tune transfer", || finetune_transfer(&mut lab)));
    passed.push(run(10, "cross-scale sweep", || cross_scale_sweep(&mut lab)));

    let n_pass = passed.iter().filter(|p| **p).count();
    println!("{n_pass}/{} criteria passed", passed.len());
    if n_pass == passed.len() || std::env::var_os("GRC_ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
