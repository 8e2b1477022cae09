//! Microbenchmarks for the numeric kernels that dominate training time.

use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transapp::kernel::Real;
use transapp::{Graph, Tensor};

fn rand_f32(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_f32");
    for size in [64usize, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_f32(size * size, &mut rng);
        let b = rand_f32(size * size, &mut rng);
        let mut out = vec![0.0f32; size * size];
        group.throughput(Throughput::Elements((2 * size * size * size) as u64));
        group.bench_function(format!("nn_{size}"), |bch| {
            bch.iter(|| {
                f32::gemm_nn(size, size, size, black_box(&a), black_box(&b), &mut out, false);
                black_box(out[0])
            })
        });
        group.bench_function(format!("nt_{size}"), |bch| {
            bch.iter(|| {
                f32::gemm_nt(size, size, size, black_box(&a), black_box(&b), &mut out, false);
                black_box(out[0])
            })
        });
    }
    group.finish();
}

fn bench_conv1d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, w, cin, cout, k) = (4usize, 512usize, 48usize, 48usize, 3usize);
    let x = Tensor::new(vec![b, w, cin], rand_f32(b * w * cin, &mut rng)).unwrap();
    let wt = Tensor::new(vec![cout, cin, k], rand_f32(cout * cin * k, &mut rng)).unwrap();
    let bt = Tensor::new(vec![cout], vec![0.0; cout]).unwrap();
    c.bench_function("conv1d_dilated_4x512x48", |bch| {
        bch.iter(|| {
            let mut g: Graph<f32> = Graph::inference();
            let xid = g.constant(x.clone());
            let wid = g.constant(wt.clone());
            let bid = g.constant(bt.clone());
            let y = g.conv1d(xid, wid, bid, 4).unwrap();
            black_box(g.value(y).data()[0])
        })
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, h, w, dk) = (4usize, 4usize, 256usize, 24usize);
    let n = b * h * w * dk;
    let q = Tensor::new(vec![b, h, w, dk], rand_f32(n, &mut rng)).unwrap();
    let k = Tensor::new(vec![b, h, w, dk], rand_f32(n, &mut rng)).unwrap();
    let v = Tensor::new(vec![b, h, w, dk], rand_f32(n, &mut rng)).unwrap();
    c.bench_function("attention_masked_4x4x256x24", |bch| {
        bch.iter(|| {
            let mut g: Graph<f32> = Graph::inference();
            let qid = g.constant(q.clone());
            let kid = g.constant(k.clone());
            let vid = g.constant(v.clone());
            let y = g.attention(qid, kid, vid, true).unwrap();
            black_box(g.value(y).data()[0])
        })
    });
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Tensor::new(vec![1024, 256], rand_f32(1024 * 256, &mut rng)).unwrap();
    c.bench_function("softmax_1024x256", |bch| {
        bch.iter(|| {
            let mut g: Graph<f32> = Graph::inference();
            let x = g.constant(t.clone());
            let y = g.softmax(x).unwrap();
            black_box(g.value(y).data()[0])
        })
    });
}

criterion_group!(benches, bench_gemm, bench_conv1d, bench_attention, bench_softmax);
criterion_main!(benches);
