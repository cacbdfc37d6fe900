use criterion::{criterion_group, criterion_main, Criterion};
use grc_core::autodiff::Tape;
use grc_core::grc::{
    batch_adjacency, bind, init_params, predict, unroll, window_targets, BatchInput, GrcConfig, Mode,
};
use grc_core::pipeline::{generate_dataset, DataGenConfig, Dtype, SplitSpec};

fn bench_model(c: &mut Criterion) {
    grc_bench::tune_allocator();
    let gen = DataGenConfig {
        n_steps: 140,
        spinup_steps: 30,
        seed: 1,
        ..DataGenConfig::default()
    };
    let ds = generate_dataset(&gen, SplitSpec::from_lengths(100, 20, 20), Dtype::Float32).unwrap();
    let data = ds.normalized();

    for (name, mode) in [("coldstart", Mode::ColdStart), ("hotstart", Mode::HotStart)] {
        let cfg = GrcConfig::new(mode);
        let params = init_params(&cfg, 0).unwrap();
        let t0s = [cfg.h_lag + 10];
        let input = BatchInput::from_windows(&cfg, &data, &t0s).unwrap();
        c.bench_function(&format!("{name}/predict_1x200"), |b| {
            b.iter(|| predict(&cfg, &params, &ds.graph, &input).unwrap())
        });

        let t0s: Vec<usize> = (0..4).map(|k| cfg.h_lag + 5 * k).collect();
        let input = BatchInput::from_windows(&cfg, &data, &t0s).unwrap();
        let truth = window_targets(&cfg, &data, &t0s);
        let adj = batch_adjacency(&cfg, &ds.graph, t0s.len());
        c.bench_function(&format!("{name}/grad_4x200"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let p = bind(&tape, &cfg, &params, |_| true).unwrap();
                let preds = unroll(&tape, &cfg, &p, adj.as_ref(), &input).unwrap();
                let mut loss = preds[0].sub(&tape.constant(truth[0].clone())).unwrap().sum_squares();
                for (pv, tv) in preds.iter().zip(&truth).skip(1) {
                    let sq = pv.sub(&tape.constant(tv.clone())).unwrap().sum_squares();
                    loss = loss.add(&sq).unwrap();
                }
                tape.backward_params(loss).unwrap()
            })
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_model
}
criterion_main!(benches);
