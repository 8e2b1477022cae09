//! Finite-difference verification of every differentiable operation and of
//! the full model, in float64. Layer-level tolerance 1e-4, full-model 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transapp::model::{TransAppConfig, TransAppModel};
use transapp::oracle::{finite_difference, max_rel_err};
use transapp::pretrain::masked_mae;
use transapp::{Graph, NodeId, Tensor};

const H: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Analytic gradient of `build`'s scalar output w.r.t. its probed leaf,
/// compared against central differences.
fn check<F>(name: &str, shape: &[usize], x0: &[f64], tol: f64, build: F)
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    let mut g = Graph::training();
    let x = g.leaf(Tensor::new(shape.to_vec(), x0.to_vec()).unwrap(), true);
    let loss = build(&mut g, x);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.backward(loss).unwrap();
    let analytic = g.grad(x).unwrap().data().to_vec();

    let numeric = finite_difference(
        |v| {
            let mut g = Graph::training();
            let x = g.leaf(Tensor::new(shape.to_vec(), v.to_vec()).unwrap(), true);
            let loss = build(&mut g, x);
            g.value(loss).data()[0]
        },
        x0,
        H,
    );
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "{name}: max relative error {err:.3e} >= {tol:.0e}");
}

/// Sum of an elementwise product with fixed coefficients, so every output
/// position contributes a distinct weight to the scalar loss.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let n = g.value(x).numel();
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.constant(Tensor::new(shape, rand_vec(n, &mut rng)).unwrap());
    let prod = g.mul(x, c).unwrap();
    g.sum_all(prod)
}

#[test]
fn elementwise_operations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2usize, 3, 4];
    let x0 = rand_vec(24, &mut rng);
    let other = Tensor::new(shape.to_vec(), rand_vec(24, &mut rng)).unwrap();

    check("add", &shape, &x0, LAYER_TOL, |g, x| {
        let c = g.constant(other.clone());
        let y = g.add(x, c).unwrap();
        weighted_sum(g, y, 11)
    });
    check("sub", &shape, &x0, LAYER_TOL, |g, x| {
        let c = g.constant(other.clone());
        let y = g.sub(x, c).unwrap();
        weighted_sum(g, y, 12)
    });
    check("mul", &shape, &x0, LAYER_TOL, |g, x| {
        let c = g.constant(other.clone());
        let y = g.mul(x, c).unwrap();
        weighted_sum(g, y, 13)
    });
    check("neg", &shape, &x0, LAYER_TOL, |g, x| {
        let y = g.neg(x);
        weighted_sum(g, y, 14)
    });
    check("scale", &shape, &x0, LAYER_TOL, |g, x| {
        let y = g.scale(x, 0.37);
        weighted_sum(g, y, 15)
    });
    check("exp", &shape, &x0, LAYER_TOL, |g, x| {
        let y = g.exp(x).unwrap();
        weighted_sum(g, y, 16)
    });
    check("gelu", &shape, &x0, LAYER_TOL, |g, x| {
        let y = g.gelu(x);
        weighted_sum(g, y, 17)
    });

    // abs and log need inputs bounded away from their kinks
    let positive: Vec<f64> = x0.iter().map(|v| v.abs() + 0.5).collect();
    check("log", &shape, &positive, LAYER_TOL, |g, x| {
        let y = g.log(x).unwrap();
        weighted_sum(g, y, 18)
    });
    let signed: Vec<f64> = x0
        .iter()
        .map(|v| if *v >= 0.0 { v + 0.5 } else { v - 0.5 })
        .collect();
    check("abs", &shape, &signed, LAYER_TOL, |g, x| {
        let y = g.abs(x);
        weighted_sum(g, y, 19)
    });
}

#[test]
fn reductions_and_reshapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = rand_vec(24, &mut rng);

    check("sum_all", &[2, 3, 4], &x0, LAYER_TOL, |g, x| g.sum_all(x));
    check("mean_time", &[2, 3, 4], &x0, LAYER_TOL, |g, x| {
        let y = g.mean_time(x).unwrap();
        weighted_sum(g, y, 21)
    });
    check("reshape", &[2, 3, 4], &x0, LAYER_TOL, |g, x| {
        let y = g.reshape(x, &[6, 4]).unwrap();
        weighted_sum(g, y, 22)
    });
    check("slice_rows", &[6, 4], &x0, LAYER_TOL, |g, x| {
        let y = g.slice_rows(x, 4).unwrap();
        weighted_sum(g, y, 23)
    });
    check("split_merge_heads", &[2, 3, 4], &x0, LAYER_TOL, |g, x| {
        let split = g.split_heads(x, 2).unwrap();
        let merged = g.merge_heads(split).unwrap();
        weighted_sum(g, merged, 24)
    });
    check("softmax", &[4, 6], &x0, LAYER_TOL, |g, x| {
        let y = g.softmax(x).unwrap();
        weighted_sum(g, y, 25)
    });
}

#[test]
fn matmul_both_sides_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = rand_vec(12, &mut rng); // [3, 4]
    let b0 = rand_vec(20, &mut rng); // [4, 5]
    let bt0 = rand_vec(20, &mut rng); // [5, 4]

    let b_fixed = Tensor::new(vec![4, 5], b0.clone()).unwrap();
    check("matmul lhs", &[3, 4], &a0, LAYER_TOL, |g, x| {
        let b = g.constant(b_fixed.clone());
        let y = g.matmul(x, b, false).unwrap();
        weighted_sum(g, y, 31)
    });
    let a_fixed = Tensor::new(vec![3, 4], a0.clone()).unwrap();
    check("matmul rhs", &[4, 5], &b0, LAYER_TOL, |g, x| {
        let a = g.constant(a_fixed.clone());
        let y = g.matmul(a, x, false).unwrap();
        weighted_sum(g, y, 32)
    });
    check("matmul rhs transposed", &[5, 4], &bt0, LAYER_TOL, |g, x| {
        let a = g.constant(a_fixed.clone());
        let y = g.matmul(a, x, true).unwrap();
        weighted_sum(g, y, 33)
    });
}

#[test]
fn convolution_wrt_input_weights_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, w, c_in, c_out, k) = (2usize, 8usize, 3usize, 4usize, 3usize);
    let x0 = rand_vec(b * w * c_in, &mut rng);
    let w0 = rand_vec(c_out * c_in * k, &mut rng);
    let b0 = rand_vec(c_out, &mut rng);
    let x_fixed = Tensor::new(vec![b, w, c_in], x0.clone()).unwrap();
    let w_fixed = Tensor::new(vec![c_out, c_in, k], w0.clone()).unwrap();
    let b_fixed = Tensor::new(vec![c_out], b0.clone()).unwrap();

    for dilation in [1usize, 2, 4] {
        let name = format!("conv1d d{dilation} wrt x");
        check(&name, &[b, w, c_in], &x0, LAYER_TOL, |g, x| {
            let wt = g.constant(w_fixed.clone());
            let bs = g.constant(b_fixed.clone());
            let y = g.conv1d(x, wt, bs, dilation).unwrap();
            weighted_sum(g, y, 41)
        });
        let name = format!("conv1d d{dilation} wrt w");
        check(&name, &[c_out, c_in, k], &w0, LAYER_TOL, |g, x| {
            let xs = g.constant(x_fixed.clone());
            let bs = g.constant(b_fixed.clone());
            let y = g.conv1d(xs, x, bs, dilation).unwrap();
            weighted_sum(g, y, 42)
        });
        let name = format!("conv1d d{dilation} wrt b");
        check(&name, &[c_out], &b0, LAYER_TOL, |g, x| {
            let xs = g.constant(x_fixed.clone());
            let wt = g.constant(w_fixed.clone());
            let y = g.conv1d(xs, wt, x, dilation).unwrap();
            weighted_sum(g, y, 43)
        });
    }
}

#[test]
fn normalization_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, w, d) = (2usize, 4usize, 3usize);
    let x0 = rand_vec(b * w * d, &mut rng);
    let gain0 = rand_vec(d, &mut rng);
    let shift0 = rand_vec(d, &mut rng);
    let x_fixed = Tensor::new(vec![b, w, d], x0.clone()).unwrap();
    let gain_fixed = Tensor::new(vec![d], gain0.clone()).unwrap();
    let shift_fixed = Tensor::new(vec![d], shift0.clone()).unwrap();

    check("layer_norm wrt x", &[b, w, d], &x0, LAYER_TOL, |g, x| {
        let gn = g.constant(gain_fixed.clone());
        let bs = g.constant(shift_fixed.clone());
        let y = g.layer_norm(x, gn, bs, 1e-5).unwrap();
        weighted_sum(g, y, 51)
    });
    check("layer_norm wrt gain", &[d], &gain0, LAYER_TOL, |g, x| {
        let xs = g.constant(x_fixed.clone());
        let bs = g.constant(shift_fixed.clone());
        let y = g.layer_norm(xs, x, bs, 1e-5).unwrap();
        weighted_sum(g, y, 52)
    });
    check("layer_norm wrt bias", &[d], &shift0, LAYER_TOL, |g, x| {
        let xs = g.constant(x_fixed.clone());
        let gn = g.constant(gain_fixed.clone());
        let y = g.layer_norm(xs, gn, x, 1e-5).unwrap();
        weighted_sum(g, y, 53)
    });

    // batch norm in training mode: the batch statistics move with the input
    check("batch_norm wrt x", &[b, w, d], &x0, LAYER_TOL, |g, x| {
        let sc = g.constant(gain_fixed.clone());
        let sh = g.constant(shift_fixed.clone());
        let y = g.batch_norm(x, sc, sh, 1e-5).unwrap();
        weighted_sum(g, y, 54)
    });
    check("batch_norm wrt scale", &[d], &gain0, LAYER_TOL, |g, x| {
        let xs = g.constant(x_fixed.clone());
        let sh = g.constant(shift_fixed.clone());
        let y = g.batch_norm(xs, x, sh, 1e-5).unwrap();
        weighted_sum(g, y, 55)
    });
    check("batch_norm wrt shift", &[d], &shift0, LAYER_TOL, |g, x| {
        let xs = g.constant(x_fixed.clone());
        let sc = g.constant(gain_fixed.clone());
        let y = g.batch_norm(xs, sc, x, 1e-5).unwrap();
        weighted_sum(g, y, 56)
    });
}

#[test]
fn attention_wrt_queries_keys_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, heads, w, dk) = (1usize, 2usize, 5usize, 3usize);
    let n = b * heads * w * dk;
    let q0 = rand_vec(n, &mut rng);
    let k0 = rand_vec(n, &mut rng);
    let v0 = rand_vec(n, &mut rng);
    let shape = [b, heads, w, dk];
    let q_fixed = Tensor::new(shape.to_vec(), q0.clone()).unwrap();
    let k_fixed = Tensor::new(shape.to_vec(), k0.clone()).unwrap();
    let v_fixed = Tensor::new(shape.to_vec(), v0.clone()).unwrap();

    for masked in [true, false] {
        let tag = if masked { "masked" } else { "unmasked" };
        check(&format!("attention {tag} wrt q"), &shape, &q0, LAYER_TOL, |g, x| {
            let k = g.constant(k_fixed.clone());
            let v = g.constant(v_fixed.clone());
            let y = g.attention(x, k, v, masked).unwrap();
            weighted_sum(g, y, 61)
        });
        check(&format!("attention {tag} wrt k"), &shape, &k0, LAYER_TOL, |g, x| {
            let q = g.constant(q_fixed.clone());
            let v = g.constant(v_fixed.clone());
            let y = g.attention(q, x, v, masked).unwrap();
            weighted_sum(g, y, 62)
        });
        check(&format!("attention {tag} wrt v"), &shape, &v0, LAYER_TOL, |g, x| {
            let q = g.constant(q_fixed.clone());
            let k = g.constant(k_fixed.clone());
            let y = g.attention(q, k, x, masked).unwrap();
            weighted_sum(g, y, 63)
        });
    }
}

#[test]
fn losses_and_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits0 = rand_vec(8, &mut rng); // [4, 2]
    let targets = vec![0usize, 1, 1, 0];
    check("cross_entropy", &[4, 2], &logits0, LAYER_TOL, |g, x| {
        g.cross_entropy(x, &targets).unwrap()
    });

    // a fixed seed reproduces the same dropout mask inside the probes
    let x0 = rand_vec(24, &mut rng);
    check("dropout p=0.3", &[2, 3, 4], &x0, LAYER_TOL, |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = g.dropout(x, 0.3, &mut rng).unwrap();
        weighted_sum(g, y, 71)
    });

    let pred0 = rand_vec(8, &mut rng); // [1, 8, 1]
    let target = Tensor::new(vec![1, 8, 1], rand_vec(8, &mut rng)).unwrap();
    let mask01 = Tensor::new(vec![1, 8, 1], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    check("masked_mae", &[1, 8, 1], &pred0, LAYER_TOL, |g, x| {
        masked_mae(g, x, &target, &mask01, 4).unwrap()
    });
}

/// Forward pass of a model on a fixed batch, returning the combined
/// classification and reconstruction loss.
fn model_loss(model: &TransAppModel<f64>, x: &Tensor<f64>, targets: &[usize]) -> f64 {
    let mut g = Graph::training();
    let bound = model.bind(&mut g);
    let xid = g.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = bound.encode(&mut g, xid, true, &mut rng).unwrap();
    let logits = bound.classify(&mut g, enc.z).unwrap();
    let ce = g.cross_entropy(logits, targets).unwrap();
    let recon = bound.reconstruct(&mut g, enc.z).unwrap();
    let err = {
        let tgt_load = g.constant(slice_load(x));
        let diff = g.sub(recon, tgt_load).unwrap();
        let mag = g.abs(diff);
        g.sum_all(mag)
    };
    let scaled = g.scale(err, 1.0 / (x.shape()[0] * x.shape()[1]) as f64);
    let total = g.add(ce, scaled).unwrap();
    g.value(total).data()[0]
}

fn nudge(model: &mut TransAppModel<f64>, tensor: usize, elem: usize, delta: f64) {
    let mut idx = 0;
    model.visit_params_mut(&mut |_, t| {
        if idx == tensor {
            t.data_mut()[elem] += delta;
        }
        idx += 1;
    });
}

fn slice_load(x: &Tensor<f64>) -> Tensor<f64> {
    let (b, w, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let load: Vec<f64> = x.data().chunks_exact(m).map(|row| row[0]).collect();
    Tensor::new(vec![b, w, 1], load).unwrap()
}

#[test]
fn full_tiny_model_against_finite_differences() {
    let started = std::time::Instant::now();
    let cfg = TransAppConfig {
        d_model: 8,
        heads: 2,
        n_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        ..Default::default()
    };
    let mut model = TransAppModel::<f64>::new(cfg, 0, 0).unwrap();
    let (b, w, m) = (2usize, 6usize, 5usize);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![b, w, m], rand_vec(b * w * m, &mut rng)).unwrap();
    let targets = vec![0usize, 1];

    // analytic gradients for every parameter, in bind order
    let mut g = Graph::training();
    let bound = model.bind(&mut g);
    let xid = g.constant(x.clone());
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
    let enc = bound.encode(&mut g, xid, true, &mut fwd_rng).unwrap();
    let logits = bound.classify(&mut g, enc.z).unwrap();
    let ce = g.cross_entropy(logits, &targets).unwrap();
    let recon = bound.reconstruct(&mut g, enc.z).unwrap();
    let tgt_load = g.constant(slice_load(&x));
    let diff = g.sub(recon, tgt_load).unwrap();
    let mag = g.abs(diff);
    let err = g.sum_all(mag);
    let scaled = g.scale(err, 1.0 / (b * w) as f64);
    let total = g.add(ce, scaled).unwrap();
    g.backward(total).unwrap();
    let mut analytic = Vec::new();
    for &id in &bound.param_ids {
        let grad = g
            .take_grad(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(id).numel()]);
        analytic.extend(grad);
    }

    // numeric gradients by perturbing the stored parameters tensor by tensor
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut tensor_sizes = Vec::new();
    model.visit_params(&mut |_, t| tensor_sizes.push(t.numel()));
    for (ti, &size) in tensor_sizes.iter().enumerate() {
        for ei in 0..size {
            nudge(&mut model, ti, ei, H);
            let fp = model_loss(&model, &x, &targets);
            nudge(&mut model, ti, ei, -2.0 * H);
            let fm = model_loss(&model, &x, &targets);
            nudge(&mut model, ti, ei, H);
            numeric.push((fp - fm) / (2.0 * H));
        }
    }

    assert_eq!(analytic.len(), numeric.len());
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < MODEL_TOL, "full model: max relative error {err:.3e} >= {MODEL_TOL:.0e}");
    assert!(
        started.elapsed() < std::time::Duration::from_secs(120),
        "gradient suite exceeded its runtime budget"
    );
}
