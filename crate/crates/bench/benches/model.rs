use criterion::{criterion_group, criterion_main, Criterion};
use hbformer::attention::{BlockConfig, MwaBlockPair};
use hbformer::encoder::ModelConfig;
use hbformer::model::HbFormer;
use hbformer::train::{synth_dataset, train_step, OptimizerState, SynthConfig};
use hbformer::{Module, ParamStore, Session, Tensor};
use std::hint::black_box;

fn block_pair(c: &mut Criterion) {
    let cfg = BlockConfig {
        dim: 32,
        heads: 2,
        window: 4,
        grid: (16, 16),
        ffn_ratio: 4,
        enhanced_ffn: true,
    };
    let pair = MwaBlockPair::new("pair", cfg).unwrap();
    let store = ParamStore::init(&pair.specs(), 1);
    let data: Vec<f32> = (0..2 * 256 * 32).map(|i| (i % 17) as f32 / 17.0).collect();
    c.bench_function("mwa_block_pair_fwd_bwd_16x16x32", |b| {
        b.iter(|| {
            let mut s = Session::new(&store, true);
            let x = s.graph.constant(vec![2, 256, 32], data.clone()).unwrap();
            let y = pair.forward(&mut s, x).unwrap();
            let loss = s.graph.sum(y);
            black_box(s.graph.backward(loss).unwrap());
        })
    });
}

fn full_model(c: &mut Criterion) {
    let mut group = c.benchmark_group("hbformer_desk_64px");
    group.sample_size(10);
    let model = HbFormer::new(ModelConfig::desk()).unwrap();
    let samples = synth_dataset(4, &SynthConfig::default(), 1).unwrap();
    let image = Tensor::new(vec![1, 3, 64, 64], samples[0].image.data().to_vec()).unwrap();
    let params = model.init_params(3407);
    group.bench_function("predict_batch1", |b| {
        b.iter(|| black_box(model.predict(&params, &image).unwrap()))
    });
    group.bench_function("train_step_batch4", |b| {
        let mut params = model.init_params(3407);
        let mut opt = OptimizerState::new(1e-3, 0.98, 1e-6);
        let batch: Vec<_> = samples.iter().collect();
        b.iter(|| black_box(train_step(&model, &mut params, &mut opt, &batch).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, block_pair, full_model);
criterion_main!(benches);
