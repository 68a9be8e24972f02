use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hdc_core::data::{synthetic_set, Batch, SceneSpec};
use hdc_core::eval::predict;
use hdc_core::loss::total_loss;
use hdc_core::{HdcNet, ModelConfig};
use hdc_tensor::{parallel, Graph};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn train_step(c: &mut Criterion) {
    let (net, params) = HdcNet::new(&ModelConfig::desk(), 0).unwrap();
    let data = synthetic_set(&SceneSpec::default(), 0, 4).unwrap();
    let batch = Batch::new(&data.iter().collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("forward_backward_4x64x48");
    group.sample_size(10);
    for (name, seq) in MODES {
        parallel::force_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let g = Graph::new();
                let p = params.bind(&g);
                let pred = net.forward(&p, g.constant(batch.rgb.clone()), g.constant(batch.raw.clone())).unwrap();
                let loss = total_loss(pred, &batch.gt, &batch.mask, 0.1).unwrap().total;
                p.gradients(&g.backward(loss).unwrap())
            })
        });
    }
    parallel::force_sequential(false);
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (net, params) = HdcNet::new(&ModelConfig::desk(), 0).unwrap();
    let data = synthetic_set(&SceneSpec::default(), 0, 8).unwrap();
    let mut group = c.benchmark_group("predict_8x64x48");
    group.sample_size(10);
    for (name, seq) in MODES {
        parallel::force_sequential(seq);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| predict(&net, &params, &data).unwrap()));
    }
    parallel::force_sequential(false);
    group.finish();
}

criterion_group!(benches, train_step, inference);
criterion_main!(benches);
