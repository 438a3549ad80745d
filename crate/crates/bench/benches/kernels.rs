use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use e2ec::trainer::{collect_batch, lagrangian_gradients, SamplingStreams};
use e2ec::{BinaryChannel, BinarySymmetricChannel, Codeword, RngStream, StreamId, Trainer};
use e2ec_bench::{config, model, synthetic, CLASSES, INPUT_DIM};
use std::hint::black_box;

fn network(c: &mut Criterion) {
    let m = model(16);
    let data = synthetic(128, 1);
    let x = data.inputs.view();
    let mut g = c.benchmark_group("content_net");
    g.bench_function("predict_b128", |b| {
        b.iter(|| m.encoder.content_net.predict(black_box(x)).unwrap())
    });
    g.bench_function("forward_backward_b128", |b| {
        b.iter(|| {
            let (out, tape) = m.encoder.content_net.forward(x).unwrap();
            m.encoder.content_net.backward(&tape, out.view()).unwrap()
        })
    });
    g.finish();
}

fn coding(c: &mut Criterion) {
    let m = model(64);
    let data = synthetic(128, 2);
    let ch = BinarySymmetricChannel::new(0.1).unwrap();
    let mut g = c.benchmark_group("coding");
    g.bench_function("encode_b128_r64", |b| {
        let mut streams = SamplingStreams::new(3);
        b.iter(|| {
            m.encoder
                .encode_batch(
                    data.inputs.view(),
                    &mut streams.length,
                    &mut streams.content,
                    false,
                )
                .unwrap()
        })
    });
    g.bench_function("bsc_transmit_l64", |b| {
        let code = Codeword::new(0x0123_4567_89ab_cdef, 64, 64).unwrap();
        let mut rng = RngStream::new(4, StreamId::Channel);
        b.iter(|| ch.transmit(black_box(&code), &mut rng))
    });
    g.bench_function("collect_and_grad_b128_r64", |b| {
        let mut streams = SamplingStreams::new(5);
        let labels = data.labels.clone();
        let idx: Vec<usize> = (0..labels.len()).collect();
        let cfg = config(64, 128);
        b.iter(|| {
            let batch =
                collect_batch(&m, data.inputs.view(), &labels, &idx, &ch, &mut streams).unwrap();
            lagrangian_gradients(&batch, &m, &cfg, 0.0).unwrap()
        })
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let data = synthetic(1024, 6);
    let ch = BinarySymmetricChannel::new(0.1).unwrap();
    let mut g = c.benchmark_group("trainer");
    g.sample_size(20);
    g.bench_function("step_b128_r16", |b| {
        b.iter_batched_ref(
            || Trainer::new(config(16, 128), INPUT_DIM, CLASSES).unwrap(),
            |t| t.step(&data, &ch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, network, coding, training);
criterion_main!(benches);
