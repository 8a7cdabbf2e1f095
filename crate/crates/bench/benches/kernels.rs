use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use pneumonet_bench::{image_batch, samples};
use pneumonet_core::buffer::{DualStageBuffer, ReplayMemory};
use pneumonet_core::model::forward_on_tape;
use pneumonet_core::tensor::Padding;
use pneumonet_core::{Architecture, Model, ModelSpec, Tape, Tensor};

fn conv(c: &mut Criterion) {
    let (x, _) = image_batch(64);
    let kernel = Tensor::new(vec![16, 1, 3, 3], (0..144).map(|i| (i as f32 - 72.0) / 144.0).collect()).unwrap();
    let bias = Tensor::zeros(vec![16]);
    c.bench_function("conv3x3_1to16_b64_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xi = tape.leaf(x.clone());
            let k = tape.leaf(kernel.clone().requiring_grad());
            let bi = tape.leaf(bias.clone().requiring_grad());
            let y = tape.conv2d(xi, k, bi, Padding::Valid).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
            black_box(tape.take_grad(k));
        })
    });
}

fn train_step(c: &mut Criterion) {
    for arch in [Architecture::Pneumonet, Architecture::BaselineCnn] {
        let model = Model::build(ModelSpec::new(arch), 1);
        let (x, labels) = image_batch(64);
        c.bench_function(&format!("{arch}_step_b64"), |b| {
            b.iter(|| {
                let mut tape = Tape::<f32>::new();
                let params = model.record_parameters(&mut tape, true);
                let xi = tape.leaf(x.clone());
                let logits = forward_on_tape(model.spec(), &mut tape, &params, xi).unwrap();
                let loss = tape
                    .weighted_softmax_cross_entropy(logits, &labels, &[1.0, 1.0])
                    .unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.take_grad(params[0]));
            })
        });
    }
}

fn buffer(c: &mut Criterion) {
    let stream = samples(4096);
    c.bench_function("dual_buffer_add_4096_draw_32", |b| {
        b.iter_batched(
            || DualStageBuffer::new(250, 2, 7),
            |mut buf| {
                for chunk in stream.chunks(32) {
                    buf.add_batch(chunk);
                    black_box(buf.get_sample(32));
                }
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv, train_step, buffer);
criterion_main!(benches);
